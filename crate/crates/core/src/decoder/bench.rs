use std::time::Instant;

use super::{beam_search, BeamConfig};
use crate::error::Result;
use crate::model::LasynModel;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub tag_vocab_size: usize,
    pub beam: usize,
    /// Best-of-`repeats` mean wall time per sentence.
    pub secs_per_sentence: f64,
}

/// Times beam search over `sources` for each model and beam width. Taking
/// the minimum over repeats filters scheduler noise.
pub fn bench_decode(
    models: &[LasynModel],
    sources: &[Vec<usize>],
    beams: &[usize],
    max_len: usize,
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for model in models {
        for &beam in beams {
            let cfg = BeamConfig {
                beam,
                max_len,
                length_penalty: 1.0,
            };
            let mut best = f64::INFINITY;
            for _ in 0..repeats.max(1) {
                let t = Instant::now();
                for src in sources {
                    beam_search(model, src, &cfg)?;
                }
                best = best.min(t.elapsed().as_secs_f64());
            }
            rows.push(BenchRow {
                tag_vocab_size: model.config().tag_vocab_size,
                beam,
                secs_per_sentence: best / sources.len().max(1) as f64,
            });
        }
    }
    Ok(rows)
}
