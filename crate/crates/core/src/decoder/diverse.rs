use std::collections::HashSet;

use rand::Rng as _;

use super::{constrained_decode_with, greedy_decode_with, DecodeOutput, StepModel};
use crate::error::{LasynError, Result};
use crate::metrics::levenshtein;
use crate::model::{IncrementalDecoder, LasynModel};
use crate::tensor::rng::Rng;

const TRIES_PER_SAMPLE: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct TagSamples {
    pub sequences: Vec<Vec<usize>>,
    /// Set when fewer than the requested number of distinct sequences were
    /// found within the retry bound.
    pub shortfall: bool,
}

/// Distinct tag sequences at edit distance exactly `d` from `base`.
///
/// Each candidate applies `d` random edits (substitute, insert or delete
/// with equal odds, uniform replacement tags) and is kept only if its
/// verified distance is `d`, it is non-empty and no longer than `max_len`.
pub fn sample_tags_at_distance(
    base: &[usize],
    d: usize,
    count: usize,
    tag_vocab: usize,
    max_len: usize,
    rng: &mut Rng,
) -> Result<TagSamples> {
    if d == 0 {
        return Ok(TagSamples {
            sequences: vec![base.to_vec()],
            shortfall: count > 1,
        });
    }
    if tag_vocab < 2 {
        return Err(LasynError::config("sampling at a positive edit distance needs at least two tags"));
    }
    let mut seen = HashSet::new();
    let mut sequences = Vec::new();
    let mut tries = 0;
    while sequences.len() < count && tries < TRIES_PER_SAMPLE * count {
        tries += 1;
        let mut s = base.to_vec();
        for _ in 0..d {
            match rng.gen_range(0..3) {
                0 if !s.is_empty() => {
                    let i = rng.gen_range(0..s.len());
                    s[i] = rng.gen_range(0..tag_vocab);
                }
                1 => {
                    let i = rng.gen_range(0..=s.len());
                    s.insert(i, rng.gen_range(0..tag_vocab));
                }
                2 if !s.is_empty() => {
                    let i = rng.gen_range(0..s.len());
                    s.remove(i);
                }
                _ => {}
            }
        }
        if s.is_empty() || s.len() > max_len || levenshtein(base, &s) != d {
            continue;
        }
        if seen.insert(s.clone()) {
            sequences.push(s);
        }
    }
    Ok(TagSamples {
        shortfall: sequences.len() < count,
        sequences,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiverseOutput {
    pub base_tags: Vec<usize>,
    pub templates: Vec<Vec<usize>>,
    /// Exactly `W` outputs; when fewer distinct templates exist they are
    /// reused in order.
    pub outputs: Vec<DecodeOutput>,
    pub shortfall: bool,
}

/// Samples `w` templates at distance `d` from the greedy tag sequence and
/// decodes each under the template constraint.
pub fn diverse_translate_with<S: StepModel>(
    model: &S,
    tag_vocab: usize,
    d: usize,
    w: usize,
    beam: usize,
    max_len: usize,
    rng: &mut Rng,
) -> Result<DiverseOutput> {
    if w == 0 {
        return Err(LasynError::config("W must be at least 1"));
    }
    let greedy = greedy_decode_with(model, max_len)?;
    let base_tags = greedy.word_tags().to_vec();
    let limit = model.max_len().min(max_len).saturating_sub(1);
    let samples = sample_tags_at_distance(&base_tags, d, w, tag_vocab, limit, rng)?;
    if samples.sequences.is_empty() {
        return Err(LasynError::data(format!("no tag template at distance {d} fits the length limit")));
    }
    let decoded = samples
        .sequences
        .iter()
        .map(|t| constrained_decode_with(model, t, beam))
        .collect::<Result<Vec<_>>>()?;
    let outputs = (0..w).map(|i| decoded[i % decoded.len()].clone()).collect();
    Ok(DiverseOutput {
        base_tags,
        templates: samples.sequences,
        outputs,
        shortfall: samples.shortfall,
    })
}

pub fn diverse_translate(
    model: &LasynModel,
    src: &[usize],
    d: usize,
    w: usize,
    beam: usize,
    max_len: usize,
    rng: &mut Rng,
) -> Result<DiverseOutput> {
    let mem = model.encode(src)?;
    let dec = IncrementalDecoder::new(model, &mem);
    diverse_translate_with(&dec, model.config().tag_vocab_size, d, w, beam, max_len, rng)
}
