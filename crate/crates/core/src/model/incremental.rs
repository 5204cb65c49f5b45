//! Cached, gradient-free decoding: one new position per call.

use super::latent::LatentStepOutput;
use super::params::{AttnParams, FeedForward, Linear, Norm};
use super::{LasynModel, Memory};
use crate::error::{LasynError, Result};
use crate::tensor::kernels::{self, AttnLayout};

/// Per-hypothesis self-attention keys and values, one buffer per layer.
#[derive(Clone, Debug)]
pub struct HypothesisCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl HypothesisCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub struct IncrementalDecoder<'m> {
    model: &'m LasynModel,
    cross_keys: Vec<Vec<f64>>,
    cross_values: Vec<Vec<f64>>,
    src_len: usize,
    src_valid: usize,
    offsets: Vec<f64>,
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(model: &'m LasynModel, memory: &Memory) -> Self {
        let d = model.config.d_model;
        let mut cross_keys = Vec::new();
        let mut cross_values = Vec::new();
        for l in &model.layout.dec {
            cross_keys.push(linear(model, &memory.states, memory.len, l.cross_attn.k));
            cross_values.push(linear(model, &memory.states, memory.len, l.cross_attn.v));
        }
        let vz = model.config.tag_vocab_size;
        let mut offsets = vec![0.0; vz * d];
        if let Some(t) = model.layout.tag_embed {
            offsets[d..].copy_from_slice(model.params.tensors[t].data());
        }
        IncrementalDecoder {
            model,
            cross_keys,
            cross_values,
            src_len: memory.len,
            src_valid: memory.valid_len,
            offsets,
        }
    }

    pub fn model_max_len(&self) -> usize {
        self.model.config.max_len
    }

    pub fn empty_cache(&self) -> HypothesisCache {
        let n = self.model.layout.dec.len();
        HypothesisCache {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Feeds `tokens[i]` to hypothesis `i` at its next position and returns
    /// the trunk states `[H x d]` for those positions.
    pub fn trunk_step(&self, caches: &mut [HypothesisCache], tokens: &[usize]) -> Result<Vec<f64>> {
        let model = self.model;
        let cfg = &model.config;
        let d = cfg.d_model;
        let h = tokens.len();
        if caches.len() != h {
            return Err(LasynError::Dimension {
                op: "trunk_step",
                lhs: vec![caches.len()],
                rhs: vec![h],
            });
        }
        let table = model.params.tensors[model.layout.tgt_embed].data();
        let scale = (d as f64).sqrt();
        let mut x = vec![0.0; h * d];
        for (i, (&tok, cache)) in tokens.iter().zip(caches.iter()).enumerate() {
            if tok >= cfg.tgt_vocab_size {
                return Err(LasynError::data(format!("target id {tok} out of range")));
            }
            if cache.len >= cfg.max_len {
                return Err(LasynError::data(format!(
                    "decoder prefix exceeds max_len {}",
                    cfg.max_len
                )));
            }
            let pe = &model.positions[cache.len * d..(cache.len + 1) * d];
            for c in 0..d {
                x[i * d + c] = table[tok * d + c] * scale + pe[c];
            }
        }
        for (li, l) in model.layout.dec.iter().enumerate() {
            // self-attention over the cached prefix plus the new position
            let a = norm(model, &x, l.ln_self);
            let q = linear(model, &a, h, l.self_attn.q);
            let k = linear(model, &a, h, l.self_attn.k);
            let v = linear(model, &a, h, l.self_attn.v);
            let mut ctx = vec![0.0; h * d];
            for (i, cache) in caches.iter_mut().enumerate() {
                cache.keys[li].extend_from_slice(&k[i * d..(i + 1) * d]);
                cache.values[li].extend_from_slice(&v[i * d..(i + 1) * d]);
                let n = cache.keys[li].len() / d;
                let layout = AttnLayout {
                    batch: 1,
                    q_len: 1,
                    k_len: n,
                    heads: cfg.n_heads,
                    key_lengths: vec![n],
                    causal: false,
                    causal_offset: 0,
                };
                let (o, _) = kernels::attention_forward(
                    &q[i * d..(i + 1) * d],
                    &cache.keys[li],
                    &cache.values[li],
                    d,
                    &layout,
                );
                ctx[i * d..(i + 1) * d].copy_from_slice(&o);
            }
            add_into(&mut x, &linear(model, &ctx, h, l.self_attn.o));

            let c = norm(model, &x, l.ln_cross);
            let cross = self.cross(&c, h, l.cross_attn, li);
            add_into(&mut x, &cross);

            let f = norm(model, &x, l.ln_ff);
            add_into(&mut x, &feed_forward(model, &f, h, l.ff));
        }
        for cache in caches.iter_mut() {
            cache.len += 1;
        }
        Ok(norm(model, &x, model.layout.dec_norm))
    }

    fn cross(&self, c: &[f64], h: usize, a: AttnParams, layer: usize) -> Vec<f64> {
        let model = self.model;
        let d = model.config.d_model;
        let q = linear(model, c, h, a.q);
        let mut ctx = vec![0.0; h * d];
        let layout = AttnLayout {
            batch: 1,
            q_len: 1,
            k_len: self.src_len,
            heads: model.config.n_heads,
            key_lengths: vec![self.src_valid],
            causal: false,
            causal_offset: 0,
        };
        for i in 0..h {
            let (o, _) = kernels::attention_forward(
                &q[i * d..(i + 1) * d],
                &self.cross_keys[layer],
                &self.cross_values[layer],
                d,
                &layout,
            );
            ctx[i * d..(i + 1) * d].copy_from_slice(&o);
        }
        linear(model, &ctx, h, a.o)
    }

    /// Latent head applied to trunk rows `[H x d]`.
    pub fn head(&self, states: &[f64]) -> Result<Vec<LatentStepOutput>> {
        let model = self.model;
        let d = model.config.d_model;
        let vz = model.config.tag_vocab_size;
        let vy = model.config.tgt_vocab_size;
        let h = states.len() / d;
        let tag_logits = linear(model, states, h, model.layout.tag_head);
        let tag_logp = kernels::log_softmax_rows(&tag_logits, vz);
        let mut shifted = Vec::with_capacity(h * vz * d);
        for row in states.chunks_exact(d) {
            for off in self.offsets.chunks_exact(d) {
                shifted.extend(row.iter().zip(off).map(|(a, b)| a + b));
            }
        }
        let word_logits = linear(model, &shifted, h * vz, model.layout.word_head);
        let word_logp = kernels::log_softmax_rows(&word_logits, vy);
        (0..h)
            .map(|i| {
                LatentStepOutput::new(
                    tag_logp[i * vz..(i + 1) * vz].to_vec(),
                    word_logp[i * vz * vy..(i + 1) * vz * vy].to_vec(),
                )
            })
            .collect()
    }

    pub fn step(&self, caches: &mut [HypothesisCache], tokens: &[usize]) -> Result<Vec<LatentStepOutput>> {
        let states = self.trunk_step(caches, tokens)?;
        self.head(&states)
    }
}

fn linear(model: &LasynModel, x: &[f64], rows: usize, l: Linear) -> Vec<f64> {
    let w = &model.params.tensors[l.w];
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; rows * fan_out];
    kernels::gemm(rows, fan_in, fan_out, 1.0, x, false, w.data(), false, 0.0, &mut y);
    if let Some(b) = l.b {
        kernels::add_bias_rows(&mut y, model.params.tensors[b].data());
    }
    y
}

fn norm(model: &LasynModel, x: &[f64], n: Norm) -> Vec<f64> {
    let (y, _, _) = kernels::layer_norm_rows(
        x,
        model.params.tensors[n.gain].data(),
        model.params.tensors[n.bias].data(),
        model.config.layer_norm_eps,
    );
    y
}

fn feed_forward(model: &LasynModel, x: &[f64], rows: usize, f: FeedForward) -> Vec<f64> {
    let mut hidden = linear(model, x, rows, f.up);
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));
    linear(model, &hidden, rows, f.down)
}

fn add_into(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}
