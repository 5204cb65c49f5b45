//! Neural EM training: exact per-position E-step, gold-tag regularization
//! of the posterior, gradient M-step on the expected complete-data
//! log-likelihood, `K` EM iterations per batch, Adam with warmup.

mod adam;
mod run;

pub use adam::{adam_update, clip_global_norm, lr_schedule, AdamConfig, AdamState};
pub use run::{EpochLog, StepLog, TrainData, Trainer, EPOCH_LOG_HEADER, STEP_LOG_HEADER};

use crate::corpus::EncodedExample;
use crate::error::{LasynError, Result};
use crate::model::loss::{self, HeadOutputs};
use crate::model::{forward_rows, Bound, LasynModel, LatentStepOutput};
use crate::tensor::{rng, Graph};

/// Which head the M-step trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// EM on the latent head.
    Latent,
    /// Ordinary cross-entropy through the word projection with no tag
    /// offset: a plain transformer sharing the trunk.
    Plain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// EM iterations per batch.
    pub k: usize,
    /// Weight of the gold one-hot in the blended posterior.
    pub lambda: f64,
    pub adam: AdamConfig,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub tokens_per_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Sentences per data-parallel shard. Fixed independently of the worker
    /// count so that reductions are identical for any `threads`.
    pub shard_sentences: usize,
    pub threads: usize,
    pub objective: Objective,
    /// Validation sentences decoded greedily for the per-epoch BLEU
    /// (0 disables it).
    pub valid_decode_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 1,
            lambda: 0.2,
            adam: AdamConfig::default(),
            peak_lr: 3e-3,
            warmup_steps: 200,
            tokens_per_batch: 256,
            epochs: 10,
            seed: 1,
            clip_norm: 5.0,
            shard_sentences: 16,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            objective: Objective::Latent,
            valid_decode_limit: 200,
        }
    }
}

impl TrainConfig {
    /// Learning-rate settings of the original large-scale recipe.
    pub fn large() -> Self {
        TrainConfig {
            peak_lr: 2e-4,
            warmup_steps: 4000,
            tokens_per_batch: 2000,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.k == 0 {
            errs.push("k must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            errs.push("lambda must lie in [0, 1]");
        }
        if self.warmup_steps == 0 {
            errs.push("warmup_steps must be at least 1");
        }
        if self.tokens_per_batch == 0 {
            errs.push("tokens_per_batch must be positive");
        }
        if self.shard_sentences == 0 {
            errs.push("shard_sentences must be positive");
        }
        if self.threads == 0 {
            errs.push("threads must be at least 1");
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            errs.push("peak_lr must be finite and non-negative");
        }
        if !(self.clip_norm > 0.0) {
            errs.push("clip_norm must be positive");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            errs.push("adam betas must lie in [0, 1) and eps must be positive");
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LasynError::config(errs.join("; ")))
        }
    }

    /// Run label written to the metrics log.
    pub fn mode_label(&self, tag_vocab_size: usize) -> &'static str {
        if tag_vocab_size == 1 || self.objective == Objective::Plain {
            "baseline-transformer"
        } else if self.lambda > 0.0 {
            "supervised"
        } else {
            "unsupervised"
        }
    }
}

/// Per-position tag distributions for one sentence, laid out over a padded
/// width. Padded rows are all zero and excluded from every sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub tag_vocab_size: usize,
    /// Row-major `width x |V_z|`.
    pub probs: Vec<f64>,
    pub padded: Vec<bool>,
}

impl Posterior {
    pub fn width(&self) -> usize {
        self.padded.len()
    }

    /// Number of real positions (they always precede the padding).
    pub fn len(&self) -> usize {
        self.padded.iter().filter(|p| !**p).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.probs[n * self.tag_vocab_size..(n + 1) * self.tag_vocab_size]
    }

    /// Unpadded rows concatenated, as consumed by the M-step loss.
    pub fn real_rows(&self) -> &[f64] {
        &self.probs[..self.len() * self.tag_vocab_size]
    }

    fn from_steps(steps: &[LatentStepOutput], targets: &[usize], width: usize) -> Result<Self> {
        let vz = steps.first().map_or(1, LatentStepOutput::tag_vocab_size);
        let mut probs = vec![0.0; width * vz];
        for (n, (s, &y)) in steps.iter().zip(targets).enumerate() {
            probs[n * vz..(n + 1) * vz].copy_from_slice(&s.tag_posterior(y)?);
        }
        Ok(Posterior {
            tag_vocab_size: vz,
            probs,
            padded: (0..width).map(|n| n >= steps.len()).collect(),
        })
    }
}

/// Exact posteriors `q(z_n) ∝ P(z_n | .) P(y_n | z_n, .)` under teacher
/// forcing, eval mode; every sentence is padded to the batch's longest
/// target.
pub fn e_step(model: &LasynModel, batch: &[&EncodedExample]) -> Result<Vec<Posterior>> {
    let steps = eval_steps(model, batch, Objective::Latent)?;
    posteriors_from_steps(&steps, batch)
}

fn posteriors_from_steps(steps: &[Vec<LatentStepOutput>], batch: &[&EncodedExample]) -> Result<Vec<Posterior>> {
    let width = batch.iter().map(|e| e.tgt.len()).max().unwrap_or(0);
    steps
        .iter()
        .zip(batch)
        .map(|(s, e)| Posterior::from_steps(s, &e.tgt, width))
        .collect()
}

/// Teacher-forced step outputs. Under [`Objective::Plain`] each step is a
/// single-tag output whose only row is the plain head's distribution.
pub fn eval_steps(
    model: &LasynModel,
    batch: &[&EncodedExample],
    objective: Objective,
) -> Result<Vec<Vec<LatentStepOutput>>> {
    let pairs: Vec<(&[usize], &[usize])> = batch.iter().map(|e| (&e.src[..], &e.tgt[..])).collect();
    match objective {
        Objective::Latent => model.teacher_forced_batch(&pairs),
        Objective::Plain => {
            let mut g = Graph::no_grad();
            let bound = Bound::new(model, &mut g, false);
            let fwd = forward_rows(&bound, &mut g, &pairs)?;
            let logp = bound.plain_head(&mut g, fwd.rows)?;
            let vy = model.config().tgt_vocab_size;
            let logp = g.value(logp);
            let mut rows = logp.chunks_exact(vy);
            fwd.counts
                .iter()
                .map(|&c| {
                    (0..c)
                        .map(|_| LatentStepOutput::new(vec![0.0], rows.next().unwrap().to_vec()))
                        .collect()
                })
                .collect()
        }
    }
}

/// `q' = (1 - λ) q + λ onehot(gold)` on the positions that carry a gold tag
/// (the leading `gold.len()` rows); the remaining rows are left as they are.
pub fn regularize_posterior(q: &Posterior, gold: &[usize], lambda: f64) -> Result<Posterior> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LasynError::config(format!("lambda {lambda} outside [0, 1]")));
    }
    if gold.len() > q.len() {
        return Err(LasynError::data(format!(
            "{} gold tags for {} positions",
            gold.len(),
            q.len()
        )));
    }
    let vz = q.tag_vocab_size;
    if let Some(t) = gold.iter().find(|&&t| t >= vz) {
        return Err(LasynError::data(format!("gold tag {t} outside inventory of {vz}")));
    }
    let mut out = q.clone();
    if lambda == 0.0 {
        return Ok(out);
    }
    for (n, &t) in gold.iter().enumerate() {
        for (z, p) in out.probs[n * vz..(n + 1) * vz].iter_mut().enumerate() {
            *p = (1.0 - lambda) * *p + if z == t { lambda } else { 0.0 };
        }
    }
    Ok(out)
}

/// `sum_n sum_z q(z) [log P(z | .) + log P(y_n | z, .) - log q(z)]` over the
/// real positions, with `0 log 0 = 0`.
pub fn lower_bound_from_steps(steps: &[LatentStepOutput], targets: &[usize], q: &Posterior) -> f64 {
    let vz = q.tag_vocab_size;
    steps
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(n, (s, &y))| {
            q.probs[n * vz..(n + 1) * vz]
                .iter()
                .zip(s.joint_logprobs(y))
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, j)| p * (j - p.ln()))
                .sum::<f64>()
        })
        .sum()
}

/// Evidence lower bound of a batch under fixed posteriors.
pub fn lower_bound(model: &LasynModel, batch: &[&EncodedExample], q: &[Posterior]) -> Result<f64> {
    if q.len() != batch.len() {
        return Err(LasynError::data("one posterior per sentence required"));
    }
    let steps = eval_steps(model, batch, Objective::Latent)?;
    let mut total = 0.0;
    for ((s, e), q) in steps.iter().zip(batch).zip(q) {
        if q.len() != e.tgt.len() || q.tag_vocab_size != model.config().tag_vocab_size {
            return Err(LasynError::data("posterior does not match its sentence"));
        }
        total += lower_bound_from_steps(s, &e.tgt, q);
    }
    Ok(total)
}

/// Loss (already divided by `norm_tokens`) and parameter gradients on one
/// shard, train mode. `q` holds each sentence's posterior.
pub fn shard_loss_and_grads(
    model: &LasynModel,
    shard: &[&EncodedExample],
    q: &[&Posterior],
    objective: Objective,
    norm_tokens: usize,
    dropout_seed: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new().with_rng(rng::stream(dropout_seed, &[]));
    let bound = Bound::new(model, &mut g, true);
    let pairs: Vec<(&[usize], &[usize])> = shard.iter().map(|e| (&e.src[..], &e.tgt[..])).collect();
    let fwd = forward_rows(&bound, &mut g, &pairs)?;
    let total = match objective {
        Objective::Latent => {
            let flat: Vec<f64> = q.iter().flat_map(|p| p.real_rows().iter().copied()).collect();
            let out: HeadOutputs = loss::latent_outputs(&bound, &mut g, &fwd)?;
            loss::expected_complete_nll(&bound, &mut g, &fwd, &out, &flat)?
        }
        Objective::Plain => loss::plain_nll(&bound, &mut g, &fwd)?,
    };
    let l = g.scale(total, 1.0 / norm_tokens as f64);
    g.backward(l)?;
    let grads = bound.vars.iter().map(|&v| g.grad(v)).collect();
    Ok((g.value(l)[0], grads))
}

/// One M-step on a whole batch in a single graph: loss
/// `-(1/tokens) sum q'(z) [log P(z|.) + log P(y|z,.)]`, gradient clipping,
/// then an Adam update at learning rate `lr`. Returns the loss.
pub fn m_step(
    model: &mut LasynModel,
    batch: &[&EncodedExample],
    q: &[Posterior],
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let tokens: usize = batch.iter().map(|e| e.tgt.len()).sum();
    let qs: Vec<&Posterior> = q.iter().collect();
    let (loss, mut grads) = shard_loss_and_grads(model, batch, &qs, cfg.objective, tokens, dropout_seed)?;
    if !loss.is_finite() {
        return Err(LasynError::Numeric(format!("non-finite M-step loss {loss}")));
    }
    clip_global_norm(&mut grads, cfg.clip_norm);
    state.apply(model.params_mut(), &grads, lr, &cfg.adam);
    Ok(loss)
}
