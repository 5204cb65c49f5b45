use rand::distributions::{Distribution, Uniform};

use super::config::ModelConfig;
use crate::tensor::{rng, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayer {
    pub ln_attn: Norm,
    pub attn: AttnParams,
    pub ln_ff: Norm,
    pub ff: FeedForward,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayer {
    pub ln_self: Norm,
    pub self_attn: AttnParams,
    pub ln_cross: Norm,
    pub cross_attn: AttnParams,
    pub ln_ff: Norm,
    pub ff: FeedForward,
}

/// Indices of every parameter in the flat parameter list.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub enc: Vec<EncoderLayer>,
    pub enc_norm: Norm,
    pub dec: Vec<DecoderLayer>,
    pub dec_norm: Norm,
    pub tag_head: Linear,
    /// Learned offsets for tags `1..|V_z|`; tag 0 is the zero reference row.
    pub tag_embed: Option<usize>,
    pub word_head: Linear,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers all parameters as leaves of `g`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t)).collect()
    }
}

struct Builder {
    seed: u64,
    bound: f64,
    set: ParamSet,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.set.names.push(name);
        self.set.tensors.push(t.with_grad());
        self.set.tensors.len() - 1
    }

    /// Each matrix draws from its own stream keyed by name, so the trunk
    /// initializes identically whatever heads are attached.
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let mut r = rng::named_stream(self.seed, &name);
        let dist = Uniform::new_inclusive(-self.bound, self.bound);
        let data = (0..rows * cols).map(|_| dist.sample(&mut r)).collect();
        self.push(name, Tensor::new(vec![rows, cols], data).unwrap())
    }

    fn vector(&mut self, name: String, n: usize, value: f64) -> usize {
        self.push(name, Tensor::new(vec![n], vec![value; n]).unwrap())
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.matrix(format!("{prefix}.w"), fan_in, fan_out),
            b: Some(self.vector(format!("{prefix}.b"), fan_out, 0.0)),
        }
    }

    fn linear_no_bias(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.matrix(format!("{prefix}.w"), fan_in, fan_out),
            b: None,
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.vector(format!("{prefix}.gain"), d, 1.0),
            bias: self.vector(format!("{prefix}.bias"), d, 0.0),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnParams {
        AttnParams {
            q: self.linear(&format!("{prefix}.q"), d, d),
            // A key bias only shifts each query's scores by a constant,
            // which softmax cancels; it would carry an identically zero gradient.
            k: self.linear_no_bias(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{prefix}.up"), d, d_ff),
            down: self.linear(&format!("{prefix}.down"), d_ff, d),
        }
    }
}

pub(crate) fn build(cfg: &ModelConfig, seed: u64) -> (Layout, ParamSet) {
    let d = cfg.d_model;
    let mut b = Builder {
        seed,
        bound: 1.0 / (d as f64).sqrt(),
        set: ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        },
    };
    let src_embed = b.matrix("src_embed".into(), cfg.src_vocab_size, d);
    let tgt_embed = b.matrix("tgt_embed".into(), cfg.tgt_vocab_size, d);
    let enc = (0..cfg.n_layers_enc)
        .map(|l| EncoderLayer {
            ln_attn: b.norm(&format!("enc.{l}.ln_attn"), d),
            attn: b.attn(&format!("enc.{l}.attn"), d),
            ln_ff: b.norm(&format!("enc.{l}.ln_ff"), d),
            ff: b.ff(&format!("enc.{l}.ff"), d, cfg.d_ff),
        })
        .collect();
    let enc_norm = b.norm("enc.ln_out", d);
    let dec = (0..cfg.n_layers_dec)
        .map(|l| DecoderLayer {
            ln_self: b.norm(&format!("dec.{l}.ln_self"), d),
            self_attn: b.attn(&format!("dec.{l}.self_attn"), d),
            ln_cross: b.norm(&format!("dec.{l}.ln_cross"), d),
            cross_attn: b.attn(&format!("dec.{l}.cross_attn"), d),
            ln_ff: b.norm(&format!("dec.{l}.ln_ff"), d),
            ff: b.ff(&format!("dec.{l}.ff"), d, cfg.d_ff),
        })
        .collect();
    let dec_norm = b.norm("dec.ln_out", d);
    let word_head = b.linear("head.word", d, cfg.tgt_vocab_size);
    let tag_head = b.linear("head.tag", d, cfg.tag_vocab_size);
    let tag_embed = (cfg.tag_vocab_size > 1)
        .then(|| b.matrix("head.tag_embed".into(), cfg.tag_vocab_size - 1, d));
    (
        Layout {
            src_embed,
            tgt_embed,
            enc,
            enc_norm,
            dec,
            dec_norm,
            tag_head,
            tag_embed,
            word_head,
        },
        b.set,
    )
}
