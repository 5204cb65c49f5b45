use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::BeamConfig;
use crate::error::{LasynError, Result};
use crate::model::ModelConfig;
use crate::trainer::{AdamConfig, Objective, TrainConfig};

/// Everything one experiment needs, as read from a TOML file. Absent keys
/// take the desk-scale defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grammar: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Defaults to the corpus tag inventory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag_vocab_size: Option<usize>,
    pub max_len: usize,
    pub layer_norm_eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub k: usize,
    pub lambda: f64,
    pub objective: Objective,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub tokens_per_batch: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub shard_sentences: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub valid_decode_limit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub beam: usize,
    pub max_len: usize,
    pub length_penalty: f64,
    /// Edit distances swept by `diverse`.
    pub d: Vec<usize>,
    /// Outputs per source sentence in `diverse`.
    pub w: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            grammar: None,
            data: None,
            out: None,
            threads: None,
            model: ModelSection::default(),
            train: TrainSection::default(),
            decode: DecodeSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers_enc: m.n_layers_enc,
            n_layers_dec: m.n_layers_dec,
            d_ff: m.d_ff,
            dropout: m.dropout,
            tag_vocab_size: None,
            max_len: m.max_len,
            layer_norm_eps: m.layer_norm_eps,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            k: t.k,
            lambda: t.lambda,
            objective: t.objective,
            peak_lr: t.peak_lr,
            warmup_steps: t.warmup_steps,
            tokens_per_batch: t.tokens_per_batch,
            epochs: t.epochs,
            clip_norm: t.clip_norm,
            shard_sentences: t.shard_sentences,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            valid_decode_limit: t.valid_decode_limit,
        }
    }
}

impl Default for DecodeSection {
    fn default() -> Self {
        let b = BeamConfig::default();
        DecodeSection {
            beam: b.beam,
            max_len: b.max_len,
            length_penalty: b.length_penalty,
            d: vec![0, 2, 4],
            w: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LasynError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LasynError::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| LasynError::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Worker count: the explicit setting or every available core.
    pub fn threads(&self) -> usize {
        self.threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    /// Model shape with vocabulary sizes filled in from the corpus.
    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize, corpus_tags: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers_enc: m.n_layers_enc,
            n_layers_dec: m.n_layers_dec,
            d_ff: m.d_ff,
            dropout: m.dropout,
            src_vocab_size: src_vocab,
            tgt_vocab_size: tgt_vocab,
            tag_vocab_size: m.tag_vocab_size.unwrap_or(corpus_tags),
            max_len: m.max_len,
            layer_norm_eps: m.layer_norm_eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            k: t.k,
            lambda: t.lambda,
            adam: AdamConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            peak_lr: t.peak_lr,
            warmup_steps: t.warmup_steps,
            tokens_per_batch: t.tokens_per_batch,
            epochs: t.epochs,
            seed: self.seed,
            clip_norm: t.clip_norm,
            shard_sentences: t.shard_sentences,
            threads: self.threads(),
            objective: t.objective,
            valid_decode_limit: t.valid_decode_limit,
        }
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam: self.decode.beam,
            max_len: self.decode.max_len,
            length_penalty: self.decode.length_penalty,
        }
    }

    /// Checks every section; vocabulary sizes are validated later, once
    /// the corpus is known.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let inner = |e: LasynError| match e {
            LasynError::Config(m) => m,
            other => other.to_string(),
        };
        if let Err(e) = self.model_config(4, 4, 1).validate() {
            errs.push(inner(e));
        }
        if self.model.tag_vocab_size == Some(0) {
            errs.push("model.tag_vocab_size must be >= 1".into());
        }
        let train = TrainConfig {
            threads: 1,
            ..self.train_config()
        };
        if let Err(e) = train.validate() {
            errs.push(inner(e));
        }
        if self.threads == Some(0) {
            errs.push("threads must be at least 1".into());
        }
        let d = &self.decode;
        if d.beam == 0 || d.max_len == 0 || d.w == 0 {
            errs.push("decode.beam, decode.max_len and decode.w must be >= 1".into());
        }
        if !(d.length_penalty >= 0.0 && d.length_penalty.is_finite()) {
            errs.push("decode.length_penalty must be finite and non-negative".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LasynError::config(errs.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("sed = 3").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nlamda = 0.1").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let e = ExperimentConfig::from_toml("[train]\nlambda = 2.0\n[decode]\nbeam = 0").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("lambda") && msg.contains("beam"), "{msg}");
        assert_eq!(e.exit_code(), 2);
    }
}
