//! Central finite-difference gradient checking.

use rand::seq::index::sample;

use super::{rng, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (parameter index, flat coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` gradients against `(f(x+h) - f(x-h)) / 2h` on up to
/// `samples` coordinates drawn uniformly without replacement (all of them
/// when there are fewer). Parameters are restored before returning.
pub fn gradient_check<F>(
    params: &mut [Tensor],
    analytic: &[Vec<f64>],
    mut f: F,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let sizes: Vec<usize> = params.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut r = rng::named_stream(seed, "gradcheck");
    let mut picks: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        sample(&mut r, total, samples).into_vec()
    };
    picks.sort_unstable();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for flat in picks {
        let (mut p, mut c) = (0, flat);
        while c >= sizes[p] {
            c -= sizes[p];
            p += 1;
        }
        let orig = params[p].data()[c];
        params[p].data_mut()[c] = orig + h;
        let up = f(params);
        params[p].data_mut()[c] = orig - h;
        let down = f(params);
        params[p].data_mut()[c] = orig;
        let numeric = (up? - down?) / (2.0 * h);
        let a = analytic[p][c];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((p, c, a, numeric));
        }
    }
    Ok(report)
}
