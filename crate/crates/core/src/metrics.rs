//! Corpus BLEU, distinct-1, edit distance and tag accuracy.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::Hash;

use crate::error::{LasynError, Result};

const MAX_ORDER: usize = 4;

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 in percent with pooled clipped n-gram counts and the
/// usual brevity penalty. Orders for which the candidates contain no n-gram
/// at all (every sentence shorter than n) drop out of the geometric mean, so
/// a short corpus scored against itself still gets 100. Without `smooth`,
/// any zero precision gives 0; with it, orders above one use add-one counts.
pub fn bleu<T: Hash + Eq>(candidates: &[Vec<T>], references: &[Vec<T>], smooth: bool) -> Result<f64> {
    if candidates.is_empty() {
        return Err(LasynError::data("BLEU needs at least one candidate"));
    }
    if candidates.len() != references.len() {
        return Err(LasynError::data(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let orders = total.iter().filter(|&&t| t > 0).count();
    let mut log_prec = 0.0;
    for n in 0..orders {
        let (m, t) = if smooth && n > 0 {
            (matched[n] + 1, total[n] + 1)
        } else {
            (matched[n], total[n])
        };
        if m == 0 {
            return Ok(0.0);
        }
        log_prec += (m as f64 / t as f64).ln() / orders as f64;
    }
    let bp = (1.0 - ref_len as f64 / cand_len as f64).min(0.0);
    Ok(100.0 * (log_prec + bp).exp())
}

/// Distinct unigram types over all sentences divided by total tokens.
pub fn distinct1<T: Hash + Eq>(sentences: &[Vec<T>]) -> Result<f64> {
    let total: usize = sentences.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(LasynError::data("distinct-1 of an empty token stream"));
    }
    let types: HashSet<&T> = sentences.iter().flatten().collect();
    Ok(types.len() as f64 / total as f64)
}

/// Unit-cost edit distance (insert, delete, substitute).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Exact-match fraction over aligned positions.
pub fn tag_accuracy(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(LasynError::data(format!(
            "tag sequences differ in length: {} vs {}",
            predicted.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(LasynError::data("tag accuracy over zero positions"));
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bleu: f64,
    pub distinct1: f64,
    pub tag_accuracy: Option<f64>,
    pub sentences: usize,
    pub tokens: usize,
}

impl EvalReport {
    pub fn compute<T: Hash + Eq>(
        hypotheses: &[Vec<T>],
        references: &[Vec<T>],
        tags: Option<(&[Vec<usize>], &[Vec<usize>])>,
    ) -> Result<Self> {
        let bleu = bleu(hypotheses, references, false)?;
        let tokens = hypotheses.iter().map(Vec::len).sum();
        let distinct1 = if tokens == 0 { 0.0 } else { distinct1(hypotheses)? };
        let tag_accuracy = match tags {
            Some((pred, gold)) => {
                if pred.len() != gold.len() {
                    return Err(LasynError::data("tag file and reference differ in sentence count"));
                }
                Some(tag_accuracy(&pred.concat(), &gold.concat())?)
            }
            None => None,
        };
        Ok(EvalReport {
            bleu,
            distinct1,
            tag_accuracy,
            sentences: hypotheses.len(),
            tokens,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bleu={:.4} distinct1={:.6}", self.bleu, self.distinct1)?;
        if let Some(a) = self.tag_accuracy {
            write!(f, " tag_accuracy={a:.6}")?;
        }
        write!(f, " sentences={} tokens={}", self.sentences, self.tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_identity_and_empty() {
        let c = vec![toks("a b c d e"), toks("x y z w")];
        assert_eq!(bleu(&c, &c, false).unwrap(), 100.0);
        let empty: Vec<Vec<&str>> = vec![vec![], vec![]];
        assert_eq!(bleu(&empty, &c, false).unwrap(), 0.0);
        assert!(bleu::<&str>(&[], &[], false).is_err());
    }

    #[test]
    fn bleu_clipping_zeroes_without_smoothing() {
        let c = vec![toks("the the the the")];
        let r = vec![toks("the cat")];
        assert_eq!(bleu(&c, &r, false).unwrap(), 0.0);
        assert!(bleu(&c, &r, true).unwrap() > 0.0);
    }

    #[test]
    fn distinct_examples() {
        assert!((distinct1(&[toks("a a a")]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct1(&[toks("a b"), toks("c d")]).unwrap(), 1.0);
        assert_eq!(distinct1(&[toks("a b"), toks("a c")]).unwrap(), 0.75);
        assert!(distinct1::<&str>(&[vec![]]).is_err());
    }

    #[test]
    fn levenshtein_examples() {
        let k: Vec<char> = "kitten".chars().collect();
        let s: Vec<char> = "sitting".chars().collect();
        assert_eq!(levenshtein(&k, &s), 3);
        assert_eq!(levenshtein(&k, &k), 0);
        assert_eq!(levenshtein(&[] as &[char], &s), 7);
    }

    #[test]
    fn tag_accuracy_examples() {
        assert_eq!(tag_accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(tag_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(tag_accuracy(&[1, 0], &[1, 1]).unwrap(), 0.5);
        assert!(tag_accuracy(&[1], &[1, 2]).is_err());
    }
}
