//! Graph-building forward pass of the encoder-decoder trunk and both heads.

use super::config::BOS;
use super::params::{AttnParams, FeedForward, Linear, Norm};
use super::LasynModel;
use crate::error::Result;
use crate::tensor::{AttnLayout, Graph, Var};

/// Parameters of one model bound into a graph, plus the pass mode.
pub struct Bound<'m> {
    pub(crate) model: &'m LasynModel,
    pub(crate) vars: Vec<Var>,
    pub(crate) train: bool,
}

/// Padded token matrix: `rows * len` ids with per-row lengths.
#[derive(Clone, Debug)]
pub struct Padded {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub len: usize,
}

impl Padded {
    /// Pads with BOS; padded positions are never visible as keys and never
    /// read by a loss, so the filler id only has to be in range.
    pub fn new(seqs: &[&[usize]]) -> Self {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(1).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(BOS).take(len - s.len()));
        }
        Padded {
            ids,
            lens: seqs.iter().map(|s| s.len()).collect(),
            len,
        }
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }
}

impl<'m> Bound<'m> {
    pub fn new(model: &'m LasynModel, g: &mut Graph, train: bool) -> Self {
        Bound {
            model,
            vars: model.params.bind(g),
            train,
        }
    }

    fn p(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    fn dropout(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.train {
            g.dropout(x, self.model.config.dropout)
        } else {
            Ok(x)
        }
    }

    fn linear(&self, g: &mut Graph, x: Var, l: Linear) -> Result<Var> {
        let y = g.matmul(x, self.p(l.w))?;
        match l.b {
            Some(b) => g.add_bias(y, self.p(b)),
            None => Ok(y),
        }
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Result<Var> {
        g.layer_norm(
            x,
            self.p(n.gain),
            self.p(n.bias),
            self.model.config.layer_norm_eps,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        query: Var,
        source: Var,
        a: AttnParams,
        layout: AttnLayout,
    ) -> Result<Var> {
        let q = self.linear(g, query, a.q)?;
        let k = self.linear(g, source, a.k)?;
        let v = self.linear(g, source, a.v)?;
        let ctx = g.attention(q, k, v, layout)?;
        self.linear(g, ctx, a.o)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, f: FeedForward) -> Result<Var> {
        let h = self.linear(g, x, f.up)?;
        let h = g.relu(h);
        self.linear(g, h, f.down)
    }

    fn embed(&self, g: &mut Graph, table: usize, tokens: &Padded) -> Result<Var> {
        let d = self.model.config.d_model;
        let e = g.gather(self.p(table), &tokens.ids)?;
        let e = g.scale(e, (d as f64).sqrt());
        let mut pe = Vec::with_capacity(tokens.ids.len() * d);
        for _ in 0..tokens.batch() {
            pe.extend_from_slice(&self.model.positions[..tokens.len * d]);
        }
        let pe = g.constant(vec![tokens.ids.len(), d], pe)?;
        let x = g.add(e, pe)?;
        self.dropout(g, x)
    }

    /// Encoder states for a padded source batch, `[batch * len x d]`.
    pub fn encode(&self, g: &mut Graph, src: &Padded) -> Result<Var> {
        let layout = &self.model.layout;
        let heads = self.model.config.n_heads;
        let mut x = self.embed(g, layout.src_embed, src)?;
        for l in &layout.enc {
            let a = self.norm(g, x, l.ln_attn)?;
            let attn = AttnLayout {
                batch: src.batch(),
                q_len: src.len,
                k_len: src.len,
                heads,
                key_lengths: src.lens.clone(),
                causal: false,
                causal_offset: 0,
            };
            let a = self.attention(g, a, a, l.attn, attn)?;
            let a = self.dropout(g, a)?;
            x = g.add(x, a)?;
            let f = self.norm(g, x, l.ln_ff)?;
            let f = self.feed_forward(g, f, l.ff)?;
            let f = self.dropout(g, f)?;
            x = g.add(x, f)?;
        }
        self.norm(g, x, layout.enc_norm)
    }

    /// Decoder trunk states `h` for a padded target-input batch,
    /// `[batch * len x d]`.
    pub fn decode(&self, g: &mut Graph, memory: Var, src: &Padded, tgt: &Padded) -> Result<Var> {
        let layout = &self.model.layout;
        let heads = self.model.config.n_heads;
        let mut x = self.embed(g, layout.tgt_embed, tgt)?;
        for l in &layout.dec {
            let a = self.norm(g, x, l.ln_self)?;
            let self_layout = AttnLayout {
                batch: tgt.batch(),
                q_len: tgt.len,
                k_len: tgt.len,
                heads,
                key_lengths: tgt.lens.clone(),
                causal: true,
                causal_offset: 0,
            };
            let a = self.attention(g, a, a, l.self_attn, self_layout)?;
            let a = self.dropout(g, a)?;
            x = g.add(x, a)?;
            let c = self.norm(g, x, l.ln_cross)?;
            let cross_layout = AttnLayout {
                batch: tgt.batch(),
                q_len: tgt.len,
                k_len: src.len,
                heads,
                key_lengths: src.lens.clone(),
                causal: false,
                causal_offset: 0,
            };
            let c = self.attention(g, c, memory, l.cross_attn, cross_layout)?;
            let c = self.dropout(g, c)?;
            x = g.add(x, c)?;
            let f = self.norm(g, x, l.ln_ff)?;
            let f = self.feed_forward(g, f, l.ff)?;
            let f = self.dropout(g, f)?;
            x = g.add(x, f)?;
        }
        self.norm(g, x, layout.dec_norm)
    }

    /// Tag offsets `[|V_z| x d]` with a fixed zero row for tag 0.
    fn tag_offsets(&self, g: &mut Graph) -> Result<Var> {
        let d = self.model.config.d_model;
        let zero = g.constant(vec![1, d], vec![0.0; d])?;
        match self.model.layout.tag_embed {
            Some(t) => g.concat_rows(&[zero, self.p(t)]),
            None => Ok(zero),
        }
    }

    /// Latent head on trunk rows `h [R x d]`: returns tag log-probabilities
    /// `[R x |V_z|]` and tag-conditioned word log-probabilities
    /// `[R * |V_z| x |V_y|]` (row `r * |V_z| + z`).
    pub fn latent_head(&self, g: &mut Graph, h: Var) -> Result<(Var, Var)> {
        let layout = &self.model.layout;
        let tag_logits = self.linear(g, h, layout.tag_head)?;
        let tag_logp = g.log_softmax(tag_logits);
        let offsets = self.tag_offsets(g)?;
        let shifted = g.outer_add(h, offsets)?;
        let word_logits = self.linear(g, shifted, layout.word_head)?;
        let word_logp = g.log_softmax(word_logits);
        Ok((tag_logp, word_logp))
    }

    /// Ordinary transformer output head on the same trunk, `[R x |V_y|]`.
    pub fn plain_head(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let logits = self.linear(g, h, self.model.layout.word_head)?;
        Ok(g.log_softmax(logits))
    }
}
