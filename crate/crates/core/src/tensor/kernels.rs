//! Raw numeric kernels on row-major `f64` buffers.
//!
//! These are shared by the differentiable graph ops and by the gradient-free
//! incremental decoding path, so both routes see the same arithmetic.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`. When `trans_a` is set, `a` is stored as `k x m`;
/// when `trans_b` is set, `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the buffer lengths are asserted above and the strides describe
    // exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, false, b, false, 0.0, &mut c);
    c
}

/// Row-wise log-softmax over rows of width `cols`, stabilized by max subtraction.
pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for (d, v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}

/// Stable `ln(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Layer normalization of each row. Returns `(y, xhat, rstd)`.
pub fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cols = gain.len();
    let rows = x.len() / cols;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            y[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (y, xhat, rstd)
}

/// Add `bias` to every row of `x` in place.
pub fn add_bias_rows(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Geometry of a batched multi-head attention call.
///
/// Queries are laid out as `batch * q_len` rows and keys/values as
/// `batch * k_len` rows, each of width `heads * head_dim`. Key `j` of
/// sequence `b` is visible to query `i` when `j < key_lengths[b]` and, for
/// causal attention, `j <= i + causal_offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub key_lengths: Vec<usize>,
    pub causal: bool,
    pub causal_offset: usize,
}

impl AttnLayout {
    #[inline]
    pub fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        j < self.key_lengths[b] && (!self.causal || j <= i + self.causal_offset)
    }
}

/// Scaled dot-product attention forward. Returns `(output, probs)` where
/// probs is laid out `[batch][heads][q_len][k_len]`.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    width: usize,
    layout: &AttnLayout,
) -> (Vec<f64>, Vec<f64>) {
    let AttnLayout {
        batch,
        q_len,
        k_len,
        heads,
        ..
    } = *layout;
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * q_len * width];
    let mut probs = vec![0.0; batch * heads * q_len * k_len];
    let mut scores = vec![0.0; k_len];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..q_len {
                let qrow = &q[(b * q_len + i) * width + off..][..dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..k_len {
                    if layout.visible(b, i, j) {
                        let krow = &k[(b * k_len + j) * width + off..][..dh];
                        let s = dot(qrow, krow) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    } else {
                        scores[j] = f64::NEG_INFINITY;
                    }
                }
                let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                if max == f64::NEG_INFINITY {
                    // No visible key (padded query row); output stays zero.
                    continue;
                }
                let mut sum = 0.0;
                for j in 0..k_len {
                    let e = if scores[j] == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (scores[j] - max).exp()
                    };
                    p[j] = e;
                    sum += e;
                }
                let o = &mut out[(b * q_len + i) * width + off..][..dh];
                for j in 0..k_len {
                    p[j] /= sum;
                    if p[j] != 0.0 {
                        let vrow = &v[(b * k_len + j) * width + off..][..dh];
                        for (od, vd) in o.iter_mut().zip(vrow) {
                            *od += p[j] * vd;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Backward pass of [`attention_forward`]; accumulates into the three grads.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    grad_out: &[f64],
    width: usize,
    layout: &AttnLayout,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let AttnLayout {
        batch,
        q_len,
        k_len,
        heads,
        ..
    } = *layout;
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; k_len];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..q_len {
                let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                let go = &grad_out[(b * q_len + i) * width + off..][..dh];
                let mut weighted = 0.0;
                for j in 0..k_len {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vrow = &v[(b * k_len + j) * width + off..][..dh];
                    dp[j] = dot(go, vrow);
                    weighted += p[j] * dp[j];
                    let dvrow = &mut dv[(b * k_len + j) * width + off..][..dh];
                    for (d, g) in dvrow.iter_mut().zip(go) {
                        *d += p[j] * g;
                    }
                }
                let qrow = &q[(b * q_len + i) * width + off..][..dh];
                for j in 0..k_len {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let krow = &k[(b * k_len + j) * width + off..][..dh];
                    let dqrow = &mut dq[(b * q_len + i) * width + off..][..dh];
                    for (d, kv) in dqrow.iter_mut().zip(krow) {
                        *d += ds * kv;
                    }
                    let dkrow = &mut dk[(b * k_len + j) * width + off..][..dh];
                    for (d, qv) in dkrow.iter_mut().zip(qrow) {
                        *d += ds * qv;
                    }
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sinusoidal position encodings, `len x width`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * width];
    for pos in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            out[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.11).cos()).collect();
        let reference = naive(&a, &b, 3, 4, 5);
        // a stored transposed (4x3)
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for p in 0..4 {
                at[p * 3 + i] = a[i * 4 + p];
            }
        }
        let mut bt = vec![0.0; 20];
        for p in 0..4 {
            for j in 0..5 {
                bt[j * 4 + p] = b[p * 5 + j];
            }
        }
        let mut c = vec![0.0; 15];
        gemm(3, 4, 5, 1.0, &at, true, &bt, true, 0.0, &mut c);
        for (x, y) in c.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_of_all_neg_inf() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }
}
