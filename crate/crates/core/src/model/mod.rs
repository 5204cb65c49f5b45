//! Transformer encoder-decoder with the hybrid latent-tag output head.
//!
//! At decoder position `n` the trunk state `h_n` feeds two heads:
//!
//! * tag head: `log_softmax(h_n W_z + b_z)`, a distribution over `|V_z|` tags;
//! * word head: for every tag `z`, `log_softmax((h_n + E_z[z]) W_y + b_y)`.
//!
//! Tag values never feed back into the trunk, so the word marginal at each
//! position is an exact `|V_z|`-term sum and the sequence likelihood
//! factorizes over positions. `E_z[0]` is pinned to zero: a common shift of
//! all tag offsets is absorbed by the trunk's final layer-norm bias, and with
//! a single tag the model reduces exactly to an ordinary transformer.

mod config;
mod incremental;
mod latent;
pub mod loss;
mod params;
mod transformer;

pub use config::{ModelConfig, BOS, EOS, PAD, RESERVED_TOKENS, UNK};
pub use incremental::{HypothesisCache, IncrementalDecoder};
pub use latent::{argmax, LatentStepOutput};
pub use params::ParamSet;
pub use transformer::{Bound, Padded};

use crate::error::{LasynError, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::gradcheck::{gradient_check, GradCheckReport};
use crate::tensor::kernels;
use crate::tensor::{rng, Graph, Tensor};

#[derive(Clone, Debug)]
pub struct LasynModel {
    pub(crate) config: ModelConfig,
    pub(crate) layout: params::Layout,
    pub(crate) params: ParamSet,
    pub(crate) positions: Vec<f64>,
}

/// Encoder output for one source sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Memory {
    /// `len x d_model`, row-major.
    pub states: Vec<f64>,
    pub len: usize,
    /// Source positions that may be attended to; always `len` for a single
    /// unpadded sentence.
    pub valid_len: usize,
}

impl LasynModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, params) = params::build(&config, seed);
        let positions = kernels::sinusoidal_positions(config.max_len, config.d_model);
        Ok(LasynModel {
            config,
            layout,
            params,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Zeroes the tag and word output projections (weights and biases), which
    /// makes every head output uniform.
    pub fn zero_output_heads(&mut self) {
        let l = &self.layout;
        let heads = [l.tag_head.w, l.word_head.w]
            .into_iter()
            .chain(l.tag_head.b)
            .chain(l.word_head.b);
        for idx in heads {
            self.params.tensors[idx].data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: self.config.to_header(),
            entries: self
                .params
                .names
                .iter()
                .cloned()
                .zip(self.params.tensors.iter().cloned())
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_header(&ck.header)?;
        let mut model = LasynModel::new(config, 0)?;
        for (name, t) in model.params.names.iter().zip(model.params.tensors.iter_mut()) {
            let stored = ck
                .get(name)
                .ok_or_else(|| LasynError::Checkpoint(format!("missing parameter `{name}`")))?;
            if stored.shape() != t.shape() {
                return Err(LasynError::Dimension {
                    op: "from_checkpoint",
                    lhs: t.shape().to_vec(),
                    rhs: stored.shape().to_vec(),
                });
            }
            *t = Tensor::new(stored.shape().to_vec(), stored.data().to_vec())?.with_grad();
        }
        Ok(model)
    }

    pub fn check_source(&self, src: &[usize]) -> Result<()> {
        check_ids(src, self.config.src_vocab_size, self.config.max_len, "source")
    }

    pub fn check_target(&self, tgt: &[usize]) -> Result<()> {
        check_ids(tgt, self.config.tgt_vocab_size, self.config.max_len, "target")
    }

    /// Encodes one source sentence (already wrapped in BOS/EOS) in eval mode.
    pub fn encode(&self, src: &[usize]) -> Result<Memory> {
        self.check_source(src)?;
        let mut g = Graph::no_grad();
        let bound = Bound::new(self, &mut g, false);
        let padded = Padded::new(&[src]);
        let mem = bound.encode(&mut g, &padded)?;
        Ok(Memory {
            states: g.value(mem).to_vec(),
            len: src.len(),
            valid_len: src.len(),
        })
    }

    /// Hybrid-decoder output for the position following `prefix`, which must
    /// start with BOS. Recomputes the whole prefix; see
    /// [`IncrementalDecoder`] for the cached path used in search.
    pub fn decode_step(&self, memory: &Memory, prefix: &[usize]) -> Result<LatentStepOutput> {
        if prefix.first() != Some(&BOS) {
            return Err(LasynError::data("decoder prefix must start with BOS"));
        }
        self.check_target(prefix)?;
        let d = self.config.d_model;
        let mut g = Graph::no_grad();
        let bound = Bound::new(self, &mut g, false);
        let mem = g.constant(vec![memory.len, d], memory.states.clone())?;
        let src = Padded {
            ids: vec![BOS; memory.len],
            lens: vec![memory.valid_len],
            len: memory.len,
        };
        let tgt = Padded::new(&[prefix]);
        let h = bound.decode(&mut g, mem, &src, &tgt)?;
        let last = g.slice_rows(h, prefix.len() - 1, 1)?;
        let (tag, word) = bound.latent_head(&mut g, last)?;
        LatentStepOutput::new(g.value(tag).to_vec(), g.value(word).to_vec())
    }

    /// Teacher-forced step outputs for every position of `targets`
    /// (the sequence to be predicted, normally ending in EOS), eval mode.
    pub fn teacher_forced_steps(&self, src: &[usize], targets: &[usize]) -> Result<Vec<LatentStepOutput>> {
        let mut out = self.teacher_forced_batch(&[(src, targets)])?;
        Ok(out.pop().unwrap())
    }

    /// Batched teacher-forced step outputs, eval mode, no gradients.
    pub fn teacher_forced_batch(
        &self,
        pairs: &[(&[usize], &[usize])],
    ) -> Result<Vec<Vec<LatentStepOutput>>> {
        let mut g = Graph::no_grad();
        let bound = Bound::new(self, &mut g, false);
        let fwd = forward_rows(&bound, &mut g, pairs)?;
        let (tag, word) = bound.latent_head(&mut g, fwd.rows)?;
        let (vz, vy) = (self.config.tag_vocab_size, self.config.tgt_vocab_size);
        let tag = g.value(tag);
        let word = g.value(word);
        let mut out = Vec::with_capacity(pairs.len());
        let mut r = 0;
        for (_, t) in pairs {
            let mut steps = Vec::with_capacity(t.len());
            for _ in 0..t.len() {
                steps.push(LatentStepOutput::new(
                    tag[r * vz..(r + 1) * vz].to_vec(),
                    word[r * vz * vy..(r + 1) * vz * vy].to_vec(),
                )?);
                r += 1;
            }
            out.push(steps);
        }
        Ok(out)
    }

    /// `-sum_n log P(y_n | x, y_<n)` with the tag marginalized per position.
    pub fn sentence_marginal_nll(&self, src: &[usize], targets: &[usize]) -> Result<f64> {
        let steps = self.teacher_forced_steps(src, targets)?;
        Ok(-steps
            .iter()
            .zip(targets)
            .map(|(s, &y)| s.marginal_word_logprobs()[y])
            .sum::<f64>())
    }

    /// NLL of an ordinary transformer that shares this trunk and word
    /// projection but has no latent head.
    pub fn plain_transformer_nll(&self, src: &[usize], targets: &[usize]) -> Result<f64> {
        let mut g = Graph::no_grad();
        let bound = Bound::new(self, &mut g, false);
        let fwd = forward_rows(&bound, &mut g, &[(src, targets)])?;
        let logp = bound.plain_head(&mut g, fwd.rows)?;
        let nll = g.cross_entropy(logp, &fwd.targets, &vec![1.0; fwd.targets.len()])?;
        Ok(g.value(nll)[0])
    }
}

fn check_ids(ids: &[usize], vocab: usize, max_len: usize, what: &str) -> Result<()> {
    if ids.is_empty() {
        return Err(LasynError::data(format!("empty {what} sequence")));
    }
    if ids.len() > max_len {
        return Err(LasynError::data(format!(
            "{what} length {} exceeds max_len {max_len}",
            ids.len()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(LasynError::data(format!(
            "{what} id {bad} outside vocabulary of {vocab}"
        )));
    }
    Ok(())
}

/// Trunk rows for the unpadded target positions of a batch.
pub struct ForwardRows {
    /// `[R x d]` decoder states, one row per predicted token in batch order.
    pub rows: crate::tensor::Var,
    /// Token to be predicted at each row.
    pub targets: Vec<usize>,
    /// Number of rows contributed by each pair.
    pub counts: Vec<usize>,
}

/// Runs encoder and decoder under teacher forcing and gathers the decoder
/// states at real (unpadded) positions.
pub fn forward_rows(
    bound: &Bound<'_>,
    g: &mut Graph,
    pairs: &[(&[usize], &[usize])],
) -> Result<ForwardRows> {
    let model = bound.model;
    let mut inputs: Vec<Vec<usize>> = Vec::with_capacity(pairs.len());
    for (src, tgt) in pairs {
        model.check_source(src)?;
        model.check_target(tgt)?;
        let mut inp = Vec::with_capacity(tgt.len());
        inp.push(BOS);
        inp.extend_from_slice(&tgt[..tgt.len() - 1]);
        inputs.push(inp);
    }
    let srcs: Vec<&[usize]> = pairs.iter().map(|p| p.0).collect();
    let ins: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
    let src = Padded::new(&srcs);
    let tgt = Padded::new(&ins);
    let mem = bound.encode(g, &src)?;
    let h = bound.decode(g, mem, &src, &tgt)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, (_, t)) in pairs.iter().enumerate() {
        for (n, &y) in t.iter().enumerate() {
            rows.push(b * tgt.len + n);
            targets.push(y);
        }
    }
    let rows = g.gather(h, &rows)?;
    Ok(ForwardRows {
        rows,
        targets,
        counts: pairs.iter().map(|p| p.1.len()).collect(),
    })
}

/// Wraps source words as `[BOS, w.., EOS]`.
pub fn wrap_source(words: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(words.len() + 2);
    v.push(BOS);
    v.extend_from_slice(words);
    v.push(EOS);
    v
}

/// Target words followed by EOS: the sequence the decoder predicts.
pub fn with_eos(words: &[usize]) -> Vec<usize> {
    let mut v = words.to_vec();
    v.push(EOS);
    v
}

/// Marginal NLL of `pairs` and its gradient for every parameter. When
/// `dropout_seed` is set the pass runs in train mode with that dropout stream.
pub fn marginal_nll_with_grad(
    model: &LasynModel,
    pairs: &[(&[usize], &[usize])],
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = match dropout_seed {
        Some(s) => Graph::new().with_rng(rng::stream(s, &[])),
        None => Graph::new(),
    };
    let bound = Bound::new(model, &mut g, dropout_seed.is_some());
    let fwd = forward_rows(&bound, &mut g, pairs)?;
    let out = loss::latent_outputs(&bound, &mut g, &fwd)?;
    let nll = loss::marginal_nll(&bound, &mut g, &fwd, &out)?;
    g.backward(nll)?;
    let grads = bound.vars.iter().map(|&v| g.grad(v)).collect();
    Ok((g.value(nll)[0], grads))
}

/// Finite-difference check of the full marginal-NLL gradient.
pub fn check_marginal_nll_gradient(
    model: &LasynModel,
    pairs: &[(&[usize], &[usize])],
    dropout_seed: Option<u64>,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, analytic) = marginal_nll_with_grad(model, pairs, dropout_seed)?;
    let mut probe = model.clone();
    let mut tensors = std::mem::take(&mut probe.params.tensors);
    gradient_check(
        &mut tensors,
        &analytic,
        |p| {
            probe.params.tensors = p.to_vec();
            let mut g = match dropout_seed {
                Some(s) => Graph::no_grad().with_rng(rng::stream(s, &[])),
                None => Graph::no_grad(),
            };
            let bound = Bound::new(&probe, &mut g, dropout_seed.is_some());
            let fwd = forward_rows(&bound, &mut g, pairs)?;
            let out = loss::latent_outputs(&bound, &mut g, &fwd)?;
            let nll = loss::marginal_nll(&bound, &mut g, &fwd, &out)?;
            Ok(g.value(nll)[0])
        },
        h,
        samples,
        seed,
    )
}
