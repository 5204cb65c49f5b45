use std::collections::BTreeMap;

use crate::error::{LasynError, Result};

/// Reserved target/source token ids.
pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED_TOKENS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub tag_vocab_size: usize,
    pub max_len: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_ff: 128,
            dropout: 0.1,
            src_vocab_size: 64,
            tgt_vocab_size: 64,
            tag_vocab_size: 6,
            max_len: 64,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Transformer "base" sizes; vocabularies still come from the corpus.
    pub fn base() -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            n_layers_enc: 6,
            n_layers_dec: 6,
            d_ff: 2048,
            dropout: 0.1,
            max_len: 256,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("d_ff", self.d_ff),
            ("tag_vocab_size", self.tag_vocab_size),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.src_vocab_size < 2 || self.tgt_vocab_size < 2 {
            problems.push("vocabularies must contain at least BOS and EOS".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LasynError::config(problems.join("; ")))
        }
    }

    pub fn to_header(&self) -> BTreeMap<String, String> {
        let mut h = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            h.insert(format!("model.{k}"), v);
        };
        put("d_model", self.d_model.to_string());
        put("n_heads", self.n_heads.to_string());
        put("n_layers_enc", self.n_layers_enc.to_string());
        put("n_layers_dec", self.n_layers_dec.to_string());
        put("d_ff", self.d_ff.to_string());
        put("dropout", format!("{:?}", self.dropout));
        put("src_vocab_size", self.src_vocab_size.to_string());
        put("tgt_vocab_size", self.tgt_vocab_size.to_string());
        put("tag_vocab_size", self.tag_vocab_size.to_string());
        put("max_len", self.max_len.to_string());
        put("layer_norm_eps", format!("{:?}", self.layer_norm_eps));
        h
    }

    pub fn from_header(h: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(h: &BTreeMap<String, String>, k: &str) -> Result<T> {
            let key = format!("model.{k}");
            h.get(&key)
                .ok_or_else(|| LasynError::Checkpoint(format!("header missing `{key}`")))?
                .parse()
                .map_err(|_| LasynError::Checkpoint(format!("header `{key}` unparsable")))
        }
        let cfg = ModelConfig {
            d_model: get(h, "d_model")?,
            n_heads: get(h, "n_heads")?,
            n_layers_enc: get(h, "n_layers_enc")?,
            n_layers_dec: get(h, "n_layers_dec")?,
            d_ff: get(h, "d_ff")?,
            dropout: get(h, "dropout")?,
            src_vocab_size: get(h, "src_vocab_size")?,
            tgt_vocab_size: get(h, "tgt_vocab_size")?,
            tag_vocab_size: get(h, "tag_vocab_size")?,
            max_len: get(h, "max_len")?,
            layer_norm_eps: get(h, "layer_norm_eps")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
