//! Byte-pair encoding with `@@` continuation markers and word-to-subword
//! tag propagation.

use std::collections::{BTreeMap, HashMap};

use crate::error::{LasynError, Result};

pub const CONTINUATION: &str = "@@";

pub type Merge = (String, String);

/// Greedy most-frequent-pair merging over the words of `sentences`,
/// weighted by word frequency. Ties go to the lexicographically smallest
/// pair, so the table is deterministic.
pub fn learn_bpe<S: AsRef<[String]>>(sentences: &[S], n_merges: usize) -> Vec<Merge> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sentences {
        for w in s.as_ref() {
            *freq.entry(w.as_str()).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(Vec<String>, usize)> = freq
        .into_iter()
        .map(|(w, f)| (w.chars().map(String::from).collect(), f))
        .collect();
    let mut merges = Vec::with_capacity(n_merges);
    for _ in 0..n_merges {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, f) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += f;
            }
        }
        // BTreeMap iteration is ordered, so the first maximum is the smallest pair.
        let Some(((a, b), _)) = pairs
            .into_iter()
            .fold(None, |best: Option<((&str, &str), usize)>, (p, c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((p, c)),
            })
        else {
            break;
        };
        let merge = (a.to_string(), b.to_string());
        for (syms, _) in &mut words {
            *syms = merge_pair(syms, &merge);
        }
        merges.push(merge);
    }
    merges
}

fn merge_pair(syms: &[String], (a, b): &Merge) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && &syms[i] == a && &syms[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

/// Segments one word by applying merges in learned order.
pub fn segment_word(word: &str, merges: &[Merge]) -> Vec<String> {
    let ranks: HashMap<(&str, &str), usize> = merges
        .iter()
        .enumerate()
        .map(|(i, (a, b))| ((a.as_str(), b.as_str()), i))
        .collect();
    let mut syms: Vec<String> = word.chars().map(String::from).collect();
    loop {
        let best = syms
            .windows(2)
            .filter_map(|w| ranks.get(&(w[0].as_str(), w[1].as_str())).copied())
            .min();
        let Some(r) = best else { break };
        syms = merge_pair(&syms, &merges[r]);
    }
    syms
}

/// Subword pieces of every token; all but the last piece of a word carry
/// the continuation marker.
pub fn apply_bpe<S: AsRef<str>>(tokens: &[S], merges: &[Merge]) -> Vec<String> {
    segment(tokens, merges).into_iter().flatten().collect()
}

/// Per-word marked pieces, so callers can propagate word-level labels.
pub fn segment<S: AsRef<str>>(tokens: &[S], merges: &[Merge]) -> Vec<Vec<String>> {
    tokens
        .iter()
        .map(|t| {
            let pieces = segment_word(t.as_ref(), merges);
            let last = pieces.len() - 1;
            pieces
                .into_iter()
                .enumerate()
                .map(|(i, p)| if i < last { format!("{p}{CONTINUATION}") } else { p })
                .collect()
        })
        .collect()
}

/// Joins marked pieces back into words.
pub fn detokenize<S: AsRef<str>>(pieces: &[S]) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for p in pieces {
        let p = p.as_ref();
        match p.strip_suffix(CONTINUATION) {
            Some(stem) => cur.push_str(stem),
            None => {
                cur.push_str(p);
                words.push(std::mem::take(&mut cur));
            }
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Every subword inherits the tag of the word it came from.
pub fn propagate_tags(word_tags: &[usize], segmentation: &[Vec<String>]) -> Result<Vec<usize>> {
    if word_tags.len() != segmentation.len() {
        return Err(LasynError::data(format!(
            "{} word tags for {} segmented words",
            word_tags.len(),
            segmentation.len()
        )));
    }
    Ok(word_tags
        .iter()
        .zip(segmentation)
        .flat_map(|(&t, pieces)| std::iter::repeat(t).take(pieces.len()))
        .collect())
}

/// Relabels tags through a total map; returns the new tags and the size of
/// the reduced inventory (the map's image, relabeled densely in order of
/// first appearance by source id).
pub fn merge_tagset(tags: &[usize], merge_map: &BTreeMap<usize, usize>, inventory: usize) -> Result<(Vec<usize>, usize)> {
    let missing: Vec<usize> = (0..inventory).filter(|t| !merge_map.contains_key(t)).collect();
    if !missing.is_empty() {
        return Err(LasynError::config(format!("tag merge map does not cover tags {missing:?}")));
    }
    let mut dense: BTreeMap<usize, usize> = BTreeMap::new();
    for t in 0..inventory {
        let next = dense.len();
        dense.entry(merge_map[&t]).or_insert(next);
    }
    let out = tags
        .iter()
        .map(|t| {
            merge_map
                .get(t)
                .map(|m| dense[m])
                .ok_or_else(|| LasynError::data(format!("tag {t} outside inventory of {inventory}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, dense.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn zero_merges_is_character_segmentation() {
        assert_eq!(apply_bpe(&["ab"], &[]), s(&["a@@", "b"]));
    }

    #[test]
    fn first_merge_is_the_most_frequent_pair() {
        let corpus = vec![s(&["aaab"]); 10];
        let m = learn_bpe(&corpus, 2);
        assert_eq!(m[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn round_trip_and_tag_propagation() {
        let corpus = vec![s(&["walking", "talking", "walked", "x"])];
        let merges = learn_bpe(&corpus, 6);
        for w in &corpus[0] {
            let pieces = apply_bpe(std::slice::from_ref(w), &merges);
            assert_eq!(detokenize(&pieces), vec![w.clone()]);
        }
        let seg = vec![s(&["walk@@", "ing"])];
        assert_eq!(propagate_tags(&[3], &seg).unwrap(), vec![3, 3]);
        assert!(propagate_tags(&[3, 1], &seg).is_err());
    }

    #[test]
    fn merging_tags() {
        let identity: BTreeMap<_, _> = (0..3).map(|t| (t, t)).collect();
        assert_eq!(merge_tagset(&[2, 0, 1], &identity, 3).unwrap(), (vec![2, 0, 1], 3));
        let all: BTreeMap<_, _> = (0..3).map(|t| (t, 9)).collect();
        assert_eq!(merge_tagset(&[2, 0, 1], &all, 3).unwrap(), (vec![0, 0, 0], 1));
        let partial: BTreeMap<_, _> = [(0, 0)].into_iter().collect();
        assert!(merge_tagset(&[0], &partial, 3).is_err());
    }
}
