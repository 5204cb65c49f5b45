//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Ordering;

use lasyn::corpus::{generate, split, EncodedExample, SynthGrammar, Vocab};
use lasyn::decoder::StepModel;
use lasyn::model::{with_eos, wrap_source, LatentStepOutput, ModelConfig, EOS, RESERVED_TOKENS};
use lasyn::tensor::rng;
use lasyn::trainer::TrainData;
use rand::Rng;

pub fn tiny_config(vz: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers_enc: 1,
        n_layers_dec: 1,
        d_ff: 16,
        dropout: 0.0,
        src_vocab_size: 10,
        tgt_vocab_size: 8,
        tag_vocab_size: vz,
        max_len: 16,
        layer_norm_eps: 1e-5,
    }
}

/// Random encoded examples for a model config; lengths in `1..=max_words`.
pub fn random_examples(cfg: &ModelConfig, n: usize, max_words: usize, seed: u64) -> Vec<EncodedExample> {
    let mut r = rng::stream(seed, &[0xe4]);
    (0..n)
        .map(|_| {
            let ls = r.gen_range(1..=max_words);
            let lt = r.gen_range(1..=max_words);
            let src: Vec<usize> = (0..ls).map(|_| r.gen_range(RESERVED_TOKENS..cfg.src_vocab_size)).collect();
            let tgt: Vec<usize> = (0..lt).map(|_| r.gen_range(RESERVED_TOKENS..cfg.tgt_vocab_size)).collect();
            EncodedExample {
                src: wrap_source(&src),
                tags: (0..lt).map(|_| r.gen_range(0..cfg.tag_vocab_size)).collect(),
                tgt: with_eos(&tgt),
            }
        })
        .collect()
}

/// Default-grammar corpus encoded with train-split vocabularies.
pub struct Synthetic {
    pub data: TrainData,
    pub test: Vec<EncodedExample>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub tags: usize,
}

pub fn synthetic(n: usize) -> Synthetic {
    let grammar = SynthGrammar::default();
    let s = split(generate(&grammar, n, grammar.seed).unwrap());
    let sv = Vocab::build(s.train.iter().map(|e| &e.src));
    let tv = Vocab::build(s.train.iter().map(|e| &e.tgt));
    let enc = |v: &[lasyn::corpus::ParallelExample]| -> Vec<EncodedExample> {
        v.iter().map(|e| EncodedExample::encode(e, &sv, &tv)).collect()
    };
    Synthetic {
        data: TrainData {
            train: enc(&s.train),
            valid: enc(&s.valid),
        },
        test: enc(&s.test),
        src_vocab: sv,
        tgt_vocab: tv,
        tags: grammar.classes.len(),
    }
}

impl Synthetic {
    pub fn model_config(&self, vz: usize) -> ModelConfig {
        ModelConfig {
            src_vocab_size: self.src_vocab.len(),
            tgt_vocab_size: self.tgt_vocab.len(),
            tag_vocab_size: vz,
            ..Default::default()
        }
    }
}

/// Step model whose output at every prefix is drawn from a stream keyed on
/// the prefix itself, so repeated queries agree. `eos_shift` is added to
/// the EOS logit of every row.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub seed: u64,
    pub vz: usize,
    pub vy: usize,
    pub eos_shift: f64,
}

fn log_normalize(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter_mut().for_each(|x| *x -= lse);
}

impl ToyModel {
    pub fn new(seed: u64, vz: usize, vy: usize) -> Self {
        ToyModel {
            seed,
            vz,
            vy,
            eos_shift: 0.0,
        }
    }

    /// Output after consuming `prefix` (which starts with BOS).
    pub fn output(&self, prefix: &[usize]) -> LatentStepOutput {
        let path: Vec<u64> = prefix.iter().map(|&t| t as u64).collect();
        let mut r = rng::stream(self.seed, &path);
        let mut tags: Vec<f64> = (0..self.vz).map(|_| r.gen_range(-2.0..2.0)).collect();
        log_normalize(&mut tags);
        let mut rows = Vec::new();
        for _ in 0..self.vz {
            let mut row: Vec<f64> = (0..self.vy).map(|_| r.gen_range(-3.0..3.0)).collect();
            row[EOS] += self.eos_shift;
            log_normalize(&mut row);
            rows.extend(row);
        }
        LatentStepOutput::new(tags, rows).unwrap()
    }
}

impl StepModel for ToyModel {
    type State = Vec<usize>;

    fn initial_state(&self) -> Vec<usize> {
        Vec::new()
    }

    fn step(&self, states: &mut [Vec<usize>], tokens: &[usize]) -> lasyn::Result<Vec<LatentStepOutput>> {
        Ok(states
            .iter_mut()
            .zip(tokens)
            .map(|(s, &t)| {
                s.push(t);
                self.output(s)
            })
            .collect())
    }
}

/// Every complete output of length at most `max_len` with its summed
/// marginal log-probability, best first by `score / len^lp`.
pub fn enumerate_outputs(m: &ToyModel, max_len: usize, lp: f64) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut frontier: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for t in 0..max_len {
        let mut next = Vec::new();
        for (seq, score) in frontier {
            let mut prefix = vec![lasyn::model::BOS];
            prefix.extend(&seq);
            let marg = m.output(&prefix).marginal_word_logprobs();
            for (y, l) in marg.iter().enumerate() {
                let mut s = seq.clone();
                s.push(y);
                if y == EOS || t + 1 == max_len {
                    out.push((s, score + l));
                } else {
                    next.push((s, score + l));
                }
            }
        }
        frontier = next;
    }
    let norm = |s: &(Vec<usize>, f64)| s.1 / (s.0.len() as f64).powf(lp);
    out.sort_by(|a, b| norm(b).partial_cmp(&norm(a)).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    out
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
