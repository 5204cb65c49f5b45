use std::collections::{BTreeSet, HashMap};

use crate::error::{LasynError, Result};
use crate::model::{BOS, EOS, PAD, RESERVED_TOKENS, UNK};

pub const SPECIALS: [&str; RESERVED_TOKENS] = ["<bos>", "<eos>", "<pad>", "<unk>"];

/// Token <-> id map with the reserved ids 0..4 fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by the distinct tokens of `sentences` in sorted order.
    pub fn build<'a, I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut set = BTreeSet::new();
        for s in sentences {
            for t in s.as_ref() {
                set.insert(t.clone());
            }
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|t| !SPECIALS.contains(&t.as_str())))
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS || tokens[..RESERVED_TOKENS] != SPECIALS {
            return Err(LasynError::data("vocabulary must start with <bos> <eos> <pad> <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(LasynError::data(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Drops BOS/EOS/PAD; unknown ids render as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != BOS && i != EOS && i != PAD)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// Space-joined form used in checkpoint headers.
    pub fn to_line(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        Self::from_tokens(line.split(' ').map(str::to_string).collect())
    }
}

/// Tag names with dense ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TagSet {
    names: Vec<String>,
}

impl TagSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(LasynError::data("empty tag inventory"));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(LasynError::data(format!("duplicate tag `{n}`")));
            }
        }
        Ok(TagSet { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| LasynError::data(format!("unknown tag `{name}`")))
    }

    pub fn name(&self, id: usize) -> &str {
        self.names.get(id).map_or("?", String::as_str)
    }

    pub fn to_line(&self) -> String {
        self.names.join(" ")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        Self::new(line.split_whitespace().map(str::to_string).collect())
    }
}
