//! Differentiable objectives over the latent head outputs.

use super::{Bound, ForwardRows};
use crate::error::{LasynError, Result};
use crate::tensor::{Graph, Var};

/// Latent head evaluated on the rows of a teacher-forced forward pass.
pub struct HeadOutputs {
    pub tag_logp: Var,
    pub word_logp: Var,
}

pub fn latent_outputs(bound: &Bound<'_>, g: &mut Graph, fwd: &ForwardRows) -> Result<HeadOutputs> {
    let (tag_logp, word_logp) = bound.latent_head(g, fwd.rows)?;
    Ok(HeadOutputs {
        tag_logp,
        word_logp,
    })
}

/// `[R x |V_z|]` matrix of `log P(y_r | z, .)` for each row's target word.
fn observed_word_logp(g: &mut Graph, out: &HeadOutputs, targets: &[usize], vz: usize, vy: usize) -> Result<Var> {
    let idx: Vec<usize> = targets
        .iter()
        .enumerate()
        .flat_map(|(r, &y)| (0..vz).map(move |z| (r * vz + z) * vy + y))
        .collect();
    g.take(out.word_logp, &idx, vec![targets.len(), vz])
}

/// `-sum_r log sum_z P(z | .) P(y_r | z, .)`, summed over rows.
pub fn marginal_nll(bound: &Bound<'_>, g: &mut Graph, fwd: &ForwardRows, out: &HeadOutputs) -> Result<Var> {
    let cfg = &bound.model.config;
    let words = observed_word_logp(g, out, &fwd.targets, cfg.tag_vocab_size, cfg.tgt_vocab_size)?;
    let joint = g.add(out.tag_logp, words)?;
    let per_row = g.log_sum_exp_rows(joint)?;
    let total = g.sum(per_row);
    Ok(g.scale(total, -1.0))
}

/// Expected complete-data negative log-likelihood under fixed posteriors:
/// `-sum_r sum_z q_r(z) [log P(z | .) + log P(y_r | z, .)]`.
///
/// `q` is row-major `[R x |V_z|]` and is treated as a constant.
pub fn expected_complete_nll(
    bound: &Bound<'_>,
    g: &mut Graph,
    fwd: &ForwardRows,
    out: &HeadOutputs,
    q: &[f64],
) -> Result<Var> {
    let cfg = &bound.model.config;
    let (vz, vy) = (cfg.tag_vocab_size, cfg.tgt_vocab_size);
    if q.len() != fwd.targets.len() * vz {
        return Err(LasynError::Dimension {
            op: "expected_complete_nll",
            lhs: vec![fwd.targets.len(), vz],
            rhs: vec![q.len()],
        });
    }
    let words = observed_word_logp(g, out, &fwd.targets, vz, vy)?;
    let joint = g.add(out.tag_logp, words)?;
    let weights: Vec<f64> = q.iter().map(|w| -w).collect();
    g.weighted_sum(joint, weights)
}

/// Cross-entropy of an ordinary transformer head on the same trunk rows.
pub fn plain_nll(bound: &Bound<'_>, g: &mut Graph, fwd: &ForwardRows) -> Result<Var> {
    let logp = bound.plain_head(g, fwd.rows)?;
    g.cross_entropy(logp, &fwd.targets, &vec![1.0; fwd.targets.len()])
}
