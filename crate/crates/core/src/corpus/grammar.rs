use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LasynError, Result};

/// One word class: a tag, its source lexicon and the aligned target words
/// (`source[i]` translates to `target[i]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordClass {
    pub name: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
}

/// A source class sequence and the permutation giving target order:
/// target slot `i` realizes source slot `order[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pattern {
    pub name: String,
    pub slots: Vec<String>,
    pub order: Vec<usize>,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

/// Synthetic translation grammar. Stored as TOML:
///
/// ```toml
/// seed = 7
///
/// [[class]]
/// name = "DET"
/// source = ["ka", "ke"]
/// target = ["the", "a"]
///
/// [[pattern]]
/// name = "svo"
/// slots = ["DET", "NOUN", "VERB"]
/// order = [0, 1, 2]
/// weight = 1.0
/// ```
///
/// Class order fixes tag ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthGrammar {
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "class")]
    pub classes: Vec<WordClass>,
    #[serde(rename = "pattern")]
    pub patterns: Vec<Pattern>,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl Default for SynthGrammar {
    /// Six classes of eight words and three patterns, two of which reorder.
    fn default() -> Self {
        let class = |name: &str, src: &str, tgt: &str| WordClass {
            name: name.into(),
            source: words(src),
            target: words(tgt),
        };
        let pattern = |name: &str, slots: &str, order: &[usize]| Pattern {
            name: name.into(),
            slots: words(slots),
            order: order.to_vec(),
            weight: 1.0,
        };
        SynthGrammar {
            seed: 7,
            classes: vec![
                class("DET", "ka ke ki ko ku kai kei kou", "the a this that some every each no"),
                class(
                    "ADJ",
                    "bora bera bira bura bara bori beri buri",
                    "red big old new small tall dark happy",
                ),
                class(
                    "NOUN",
                    "tamo temo timo tomo tumo tamu temu tima",
                    "cat dog bird house tree river man child",
                ),
                class(
                    "VERB",
                    "selu salu silu solu sulu seli sali sili",
                    "sees eats finds likes takes makes holds wants",
                ),
                class(
                    "ADV",
                    "nupe nipe nape nope nepe nupa nipa napa",
                    "quickly slowly often rarely never always soon here",
                ),
                class("PUNCT", ". ! ? ; : ... ?! !!", ". ! ? ; : ... ?! !!"),
            ],
            patterns: vec![
                pattern("adj-postposition", "DET ADJ NOUN VERB PUNCT", &[0, 2, 1, 3, 4]),
                pattern("adverb-first", "DET NOUN VERB ADV PUNCT", &[0, 1, 3, 2, 4]),
                pattern(
                    "verb-final",
                    "DET ADJ NOUN VERB DET NOUN PUNCT",
                    &[0, 2, 1, 4, 5, 3, 6],
                ),
            ],
        }
    }
}

impl SynthGrammar {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: SynthGrammar =
            toml::from_str(text).map_err(|e| LasynError::config(format!("grammar: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grammar serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn tag_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Checks every structural requirement and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.classes.is_empty() {
            errs.push("no word classes".to_string());
        }
        if self.patterns.is_empty() {
            errs.push("no patterns".to_string());
        }
        let mut names = HashSet::new();
        let mut src_seen = HashSet::new();
        let mut tgt_seen = HashSet::new();
        for c in &self.classes {
            if !names.insert(c.name.as_str()) {
                errs.push(format!("duplicate class `{}`", c.name));
            }
            if c.source.is_empty() {
                errs.push(format!("class `{}` has an empty lexicon", c.name));
            }
            if c.source.len() != c.target.len() {
                errs.push(format!(
                    "class `{}`: {} source words but {} target words",
                    c.name,
                    c.source.len(),
                    c.target.len()
                ));
            }
            for w in &c.source {
                if !src_seen.insert(w.as_str()) {
                    errs.push(format!("source word `{w}` appears twice"));
                }
            }
            for w in &c.target {
                if !tgt_seen.insert(w.as_str()) {
                    errs.push(format!("target word `{w}` appears twice"));
                }
            }
            for w in c.source.iter().chain(&c.target) {
                if w.is_empty() || w.chars().any(char::is_whitespace) || w.starts_with('<') {
                    errs.push(format!("invalid word `{w}` in class `{}`", c.name));
                }
            }
        }
        for p in &self.patterns {
            if p.slots.is_empty() {
                errs.push(format!("pattern `{}` has no slots", p.name));
            }
            for s in &p.slots {
                if self.class_index(s).is_none() {
                    errs.push(format!("pattern `{}` names unknown class `{s}`", p.name));
                }
            }
            let mut sorted = p.order.clone();
            sorted.sort_unstable();
            if sorted != (0..p.slots.len()).collect::<Vec<_>>() {
                errs.push(format!("pattern `{}`: order is not a permutation of its slots", p.name));
            }
            if !(p.weight.is_finite() && p.weight > 0.0) {
                errs.push(format!("pattern `{}`: weight must be positive", p.name));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LasynError::config(format!("invalid grammar: {}", errs.join("; "))))
        }
    }
}
