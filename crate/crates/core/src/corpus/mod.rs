//! Synthetic parallel corpus with gold target tags, vocabularies, subword
//! segmentation and token-budget batching.

pub mod bpe;
mod grammar;
mod vocab;

pub use grammar::{Pattern, SynthGrammar, WordClass};
pub use vocab::{TagSet, Vocab, SPECIALS};

use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, Uniform, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{LasynError, Result};
use crate::model::{wrap_source, with_eos};
use crate::tensor::rng;

/// One sentence pair; `tags[i]` is the gold tag of `tgt[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelExample {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub tags: Vec<usize>,
}

impl ParallelExample {
    pub fn check(&self, tag_vocab: usize) -> Result<()> {
        if self.tags.len() != self.tgt.len() {
            return Err(LasynError::data(format!(
                "{} tags for {} target tokens",
                self.tags.len(),
                self.tgt.len()
            )));
        }
        if let Some(t) = self.tags.iter().find(|&&t| t >= tag_vocab) {
            return Err(LasynError::data(format!("tag id {t} outside inventory of {tag_vocab}")));
        }
        Ok(())
    }
}

/// Generates `n` pairs; example `i` depends only on `(seed, i)`.
pub fn generate(grammar: &SynthGrammar, n: usize, seed: u64) -> Result<Vec<ParallelExample>> {
    if n == 0 {
        return Err(LasynError::config("corpus size must be at least 1"));
    }
    grammar.validate()?;
    let weights = WeightedIndex::new(grammar.patterns.iter().map(|p| p.weight))
        .map_err(|e| LasynError::config(format!("pattern weights: {e}")))?;
    let slot_classes: Vec<Vec<usize>> = grammar
        .patterns
        .iter()
        .map(|p| p.slots.iter().map(|s| grammar.class_index(s).unwrap()).collect())
        .collect();
    Ok((0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &[i as u64]);
            let p = weights.sample(&mut r);
            let classes = &slot_classes[p];
            let picks: Vec<usize> = classes
                .iter()
                .map(|&c| Uniform::new(0, grammar.classes[c].source.len()).sample(&mut r))
                .collect();
            let src = classes
                .iter()
                .zip(&picks)
                .map(|(&c, &w)| grammar.classes[c].source[w].clone())
                .collect();
            let order = &grammar.patterns[p].order;
            let tgt = order
                .iter()
                .map(|&j| grammar.classes[classes[j]].target[picks[j]].clone())
                .collect();
            let tags = order.iter().map(|&j| classes[j]).collect();
            ParallelExample { src, tgt, tags }
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<ParallelExample>,
    pub valid: Vec<ParallelExample>,
    pub test: Vec<ParallelExample>,
}

const SPLIT_SALT: u64 = 0x5a17_c0de;

/// 80/10/10 split keyed on a hash of each example's index.
pub fn split(examples: Vec<ParallelExample>) -> Split {
    let mut s = Split::default();
    for (i, ex) in examples.into_iter().enumerate() {
        match rng::derive_seed(SPLIT_SALT, &[i as u64]) % 10 {
            8 => s.valid.push(ex),
            9 => s.test.push(ex),
            _ => s.train.push(ex),
        }
    }
    s
}

/// Three tab-separated columns: source tokens, target tokens, target tags.
pub fn format_tsv(examples: &[ParallelExample], tags: &TagSet) -> String {
    let mut out = String::new();
    for ex in examples {
        let names: Vec<&str> = ex.tags.iter().map(|&t| tags.name(t)).collect();
        let _ = writeln!(out, "{}\t{}\t{}", ex.src.join(" "), ex.tgt.join(" "), names.join(" "));
    }
    out
}

pub fn parse_tsv(text: &str, tags: &TagSet) -> Result<Vec<ParallelExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(LasynError::data(format!(
                    "line {}: expected 3 tab-separated columns, found {}",
                    n + 1,
                    cols.len()
                )));
            }
            let split = |c: &str| c.split_whitespace().map(str::to_string).collect::<Vec<_>>();
            let ex = ParallelExample {
                src: split(cols[0]),
                tgt: split(cols[1]),
                tags: cols[2]
                    .split_whitespace()
                    .map(|t| tags.id(t))
                    .collect::<Result<_>>()?,
            };
            ex.check(tags.len())
                .map_err(|e| LasynError::data(format!("line {}: {e}", n + 1)))?;
            Ok(ex)
        })
        .collect()
}

pub fn write_tsv(path: &Path, examples: &[ParallelExample], tags: &TagSet) -> Result<()> {
    std::fs::write(path, format_tsv(examples, tags))?;
    Ok(())
}

pub fn read_tsv(path: &Path, tags: &TagSet) -> Result<Vec<ParallelExample>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LasynError::data(format!("{}: {e}", path.display())))?;
    parse_tsv(&text, tags)
}

/// Model-ready ids: the source wrapped in BOS/EOS, the target followed by
/// EOS, and one gold tag per target word (the EOS position has none).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub tags: Vec<usize>,
}

impl EncodedExample {
    pub fn encode(ex: &ParallelExample, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Self {
        EncodedExample {
            src: wrap_source(&src_vocab.encode(&ex.src)),
            tgt: with_eos(&tgt_vocab.encode(&ex.tgt)),
            tags: ex.tags.clone(),
        }
    }

    /// Target words without the final EOS.
    pub fn words(&self) -> &[usize] {
        &self.tgt[..self.tgt.len() - 1]
    }
}

/// Indices of the examples forming one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub target_tokens: usize,
}

/// Length-bucketed batches whose target tokens (EOS included) fit the
/// budget; bucket contents and batch order are shuffled from `seed`.
pub fn make_batches(examples: &[EncodedExample], tokens_per_batch: usize, seed: u64) -> Result<Vec<Batch>> {
    if let Some((i, ex)) = examples.iter().enumerate().find(|(_, e)| e.tgt.len() > tokens_per_batch) {
        return Err(LasynError::data(format!(
            "example {i} has {} target tokens, over the batch budget of {tokens_per_batch}",
            ex.tgt.len()
        )));
    }
    let mut r = rng::stream(seed, &[]);
    let mut keyed: Vec<(usize, usize, u64, usize)> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| (e.tgt.len(), e.src.len(), r.gen::<u64>(), i))
        .collect();
    keyed.sort_unstable();
    let mut batches = Vec::new();
    let mut cur = Batch {
        indices: Vec::new(),
        target_tokens: 0,
    };
    for (len, _, _, i) in keyed {
        if cur.target_tokens + len > tokens_per_batch {
            batches.push(std::mem::replace(
                &mut cur,
                Batch {
                    indices: Vec::new(),
                    target_tokens: 0,
                },
            ));
        }
        cur.indices.push(i);
        cur.target_tokens += len;
    }
    if !cur.indices.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(&mut r);
    Ok(batches)
}
