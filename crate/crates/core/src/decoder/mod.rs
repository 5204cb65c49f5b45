//! Inference: marginalized beam search, greedy and tag-constrained decoding,
//! tag-template sampling and decode-speed measurement.

mod bench;
mod diverse;
pub mod output;

pub use bench::{bench_decode, BenchRow};
pub use diverse::{diverse_translate, diverse_translate_with, sample_tags_at_distance, DiverseOutput, TagSamples};
pub use output::{format_records, parse_records, DecodeRecord};

use std::cmp::Ordering;

use crate::error::{LasynError, Result};
use crate::model::{argmax, HypothesisCache, IncrementalDecoder, LasynModel, LatentStepOutput, BOS, EOS};

/// Anything that can score the next position of a batch of hypotheses.
/// Implemented by the cached model decoder and by hand-built toy models.
pub trait StepModel {
    type State: Clone;

    fn initial_state(&self) -> Self::State;

    /// Feeds `tokens[i]` to hypothesis `i` and returns its next-position
    /// output.
    fn step(&self, states: &mut [Self::State], tokens: &[usize]) -> Result<Vec<LatentStepOutput>>;

    /// Longest output (EOS included) the model can score.
    fn max_len(&self) -> usize {
        usize::MAX
    }
}

impl StepModel for IncrementalDecoder<'_> {
    type State = HypothesisCache;

    fn initial_state(&self) -> HypothesisCache {
        self.empty_cache()
    }

    fn step(&self, states: &mut [HypothesisCache], tokens: &[usize]) -> Result<Vec<LatentStepOutput>> {
        IncrementalDecoder::step(self, states, tokens)
    }

    fn max_len(&self) -> usize {
        self.model_max_len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 5,
            max_len: 64,
            length_penalty: 1.0,
        }
    }
}

/// A finished decode. `tokens` excludes BOS and ends with EOS unless the
/// length limit was hit; `tags[i]` is the tag chosen for `tokens[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<usize>,
    pub tags: Vec<usize>,
    pub score: f64,
    /// Log-probability credited to each emitted token.
    pub step_logprobs: Vec<f64>,
}

impl DecodeOutput {
    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// Tokens without the final EOS.
    pub fn words(&self) -> &[usize] {
        let n = self.tokens.len() - usize::from(self.finished());
        &self.tokens[..n]
    }

    pub fn word_tags(&self) -> &[usize] {
        &self.tags[..self.words().len()]
    }

    pub fn normalized_score(&self, length_penalty: f64) -> f64 {
        self.score / (self.tokens.len().max(1) as f64).powf(length_penalty)
    }
}

struct Hyp<S> {
    tokens: Vec<usize>,
    tags: Vec<usize>,
    score: f64,
    rank: f64,
    logps: Vec<f64>,
    state: S,
}

impl<S> Hyp<S> {
    fn start(state: S) -> Self {
        Hyp {
            tokens: Vec::new(),
            tags: Vec::new(),
            score: 0.0,
            rank: 0.0,
            logps: Vec::new(),
            state,
        }
    }

    fn last(&self) -> usize {
        self.tokens.last().copied().unwrap_or(BOS)
    }

    fn output(self) -> DecodeOutput {
        DecodeOutput {
            tokens: self.tokens,
            tags: self.tags,
            score: self.score,
            step_logprobs: self.logps,
        }
    }
}

/// Candidate `(score, hypothesis, token)`; best first, then lowest
/// hypothesis index, then lowest token id.
fn by_score(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

fn run_step<S: StepModel>(model: &S, alive: &mut [Hyp<S::State>]) -> Result<Vec<LatentStepOutput>> {
    let tokens: Vec<usize> = alive.iter().map(Hyp::last).collect();
    let mut states: Vec<S::State> = alive.iter().map(|h| h.state.clone()).collect();
    let out = model.step(&mut states, &tokens)?;
    for (h, s) in alive.iter_mut().zip(states) {
        h.state = s;
    }
    Ok(out)
}

/// Beam search scoring every expansion by the tag-marginal word
/// log-probability. Each step keeps the best `beam` expansions overall;
/// those ending in EOS (or reaching `max_len`) move to the finished pool.
/// Finished hypotheses are ranked by `score / len^length_penalty`.
pub fn beam_search_with<S: StepModel>(model: &S, cfg: &BeamConfig) -> Result<Vec<DecodeOutput>> {
    if cfg.beam == 0 {
        return Err(LasynError::config("beam size must be at least 1"));
    }
    let max_len = cfg.max_len.min(model.max_len());
    if max_len == 0 {
        return Err(LasynError::config("max_len must be at least 1"));
    }
    let mut alive = vec![Hyp::start(model.initial_state())];
    let mut finished: Vec<DecodeOutput> = Vec::new();
    for t in 0..max_len {
        if alive.is_empty() {
            break;
        }
        let outs = run_step(model, &mut alive)?;
        let margs: Vec<Vec<f64>> = outs.iter().map(LatentStepOutput::marginal_word_logprobs).collect();
        let mut cands: Vec<(f64, usize, usize)> = margs
            .iter()
            .enumerate()
            .flat_map(|(i, m)| {
                let base = alive[i].score;
                m.iter().enumerate().map(move |(y, lp)| (base + lp, i, y))
            })
            .collect();
        cands.sort_unstable_by(by_score);
        cands.truncate(cfg.beam);
        let mut next = Vec::with_capacity(cands.len());
        for (score, i, y) in cands {
            let parent = &alive[i];
            let mut tokens = parent.tokens.clone();
            tokens.push(y);
            let mut tags = parent.tags.clone();
            tags.push(outs[i].best_tag_given(y));
            let mut logps = parent.logps.clone();
            logps.push(margs[i][y]);
            let h = Hyp {
                tokens,
                tags,
                score,
                rank: score,
                logps,
                state: parent.state.clone(),
            };
            if y == EOS || t + 1 == max_len {
                finished.push(h.output());
            } else {
                next.push(h);
            }
        }
        alive = next;
    }
    finished.sort_by(|a, b| {
        b.normalized_score(cfg.length_penalty)
            .total_cmp(&a.normalized_score(cfg.length_penalty))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    finished.truncate(cfg.beam);
    Ok(finished)
}

/// Picks the most probable marginal word at every step until EOS.
pub fn greedy_decode_with<S: StepModel>(model: &S, max_len: usize) -> Result<DecodeOutput> {
    let max_len = max_len.min(model.max_len());
    if max_len == 0 {
        return Err(LasynError::config("max_len must be at least 1"));
    }
    let mut state = vec![model.initial_state()];
    let mut out = DecodeOutput {
        tokens: Vec::new(),
        tags: Vec::new(),
        score: 0.0,
        step_logprobs: Vec::new(),
    };
    let mut last = BOS;
    while out.tokens.len() < max_len {
        let step = model.step(&mut state, &[last])?.remove(0);
        let marg = step.marginal_word_logprobs();
        let y = argmax(&marg);
        out.tokens.push(y);
        out.tags.push(step.best_tag_given(y));
        out.score += marg[y];
        out.step_logprobs.push(marg[y]);
        if y == EOS {
            break;
        }
        last = y;
    }
    Ok(out)
}

/// Decodes one word per template tag, reading only that tag's word row,
/// then appends EOS. Words are ranked by the tag-conditioned word head; the
/// reported score adds the tag prior of every template step and the
/// marginal probability of the closing EOS.
pub fn constrained_decode_with<S: StepModel>(model: &S, template: &[usize], beam: usize) -> Result<DecodeOutput> {
    if template.is_empty() {
        return Err(LasynError::data("empty tag template"));
    }
    if beam == 0 {
        return Err(LasynError::config("beam size must be at least 1"));
    }
    if template.len() + 1 > model.max_len() {
        return Err(LasynError::data(format!(
            "tag template of length {} does not fit the decoder length limit",
            template.len()
        )));
    }
    let mut alive = vec![Hyp::start(model.initial_state())];
    for &z in template {
        let outs = run_step(model, &mut alive)?;
        let vz = outs[0].tag_vocab_size();
        if z >= vz {
            return Err(LasynError::data(format!("template tag {z} outside inventory of {vz}")));
        }
        let mut cands: Vec<(f64, usize, usize)> = outs
            .iter()
            .enumerate()
            .flat_map(|(i, o)| {
                let base = alive[i].rank;
                o.word_row(z)
                    .iter()
                    .enumerate()
                    .filter(|(y, _)| *y != EOS)
                    .map(move |(y, lp)| (base + lp, i, y))
            })
            .collect();
        cands.sort_unstable_by(by_score);
        cands.truncate(beam);
        alive = cands
            .into_iter()
            .map(|(rank, i, y)| {
                let parent = &alive[i];
                let lp = outs[i].word_row(z)[y];
                let mut tokens = parent.tokens.clone();
                tokens.push(y);
                let mut tags = parent.tags.clone();
                tags.push(z);
                let mut logps = parent.logps.clone();
                logps.push(lp);
                Hyp {
                    tokens,
                    tags,
                    score: parent.score + outs[i].tag_logprobs[z] + lp,
                    rank,
                    logps,
                    state: parent.state.clone(),
                }
            })
            .collect();
    }
    let outs = run_step(model, &mut alive)?;
    let best = alive
        .into_iter()
        .zip(outs)
        .map(|(mut h, o)| {
            let eos = o.marginal_word_logprobs()[EOS];
            h.tokens.push(EOS);
            h.tags.push(o.best_tag_given(EOS));
            h.score += eos;
            h.logps.push(eos);
            h
        })
        .min_by(|a, b| b.rank.total_cmp(&a.rank).then_with(|| a.tokens.cmp(&b.tokens)))
        .expect("beam is never empty");
    Ok(best.output())
}

fn with_decoder<T>(
    model: &LasynModel,
    src: &[usize],
    f: impl FnOnce(&IncrementalDecoder<'_>) -> Result<T>,
) -> Result<T> {
    let mem = model.encode(src)?;
    let dec = IncrementalDecoder::new(model, &mem);
    f(&dec)
}

/// Beam search for a wrapped source sentence.
pub fn beam_search(model: &LasynModel, src: &[usize], cfg: &BeamConfig) -> Result<Vec<DecodeOutput>> {
    with_decoder(model, src, |d| beam_search_with(d, cfg))
}

pub fn greedy_decode(model: &LasynModel, src: &[usize], max_len: usize) -> Result<DecodeOutput> {
    with_decoder(model, src, |d| greedy_decode_with(d, max_len))
}

pub fn constrained_decode(model: &LasynModel, src: &[usize], template: &[usize], beam: usize) -> Result<DecodeOutput> {
    with_decoder(model, src, |d| constrained_decode_with(d, template, beam))
}

/// Tags of the greedy translation's words: the model's most likely tag
/// sequence for this source.
pub fn top1_tags(model: &LasynModel, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    Ok(greedy_decode(model, src, max_len)?.word_tags().to_vec())
}
