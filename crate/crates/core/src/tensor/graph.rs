use std::sync::Arc;

use rand::Rng as _;

use super::kernels::{self, AttnLayout};
use super::rng::Rng;
use super::{check_shape, Tensor};
use crate::error::{LasynError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Gather { table: Var, ids: Vec<usize> },
    Concat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Relu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    LogSoftmax(Var),
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64>, layout: AttnLayout },
    OuterAdd { rows: Var, offsets: Var },
    Take { x: Var, idx: Vec<usize> },
    LogSumExpRows(Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    CrossEntropy { logp: Var, targets: Vec<usize>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, which
/// is a topological order of the computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    rng: Option<Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            grads: Vec::new(),
            backward_done: false,
            rng: None,
        }
    }

    /// A graph that records values only; `backward` is rejected.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Attach the stream used for dropout masks.
    pub fn with_rng(mut self, rng: Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.as_ref().clone()).expect("node shapes are valid")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            data: Arc::new(data),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf. Gradients are tracked when the tensor
    /// has `requires_grad` set and the graph records gradients.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.shared_data(),
            op: Op::Leaf,
            needs_grad: self.grad_enabled && t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        check_shape(&shape, data.len())?;
        Ok(self.push(shape, data, Op::Leaf, &[]))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(LasynError::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(LasynError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `a [m x k] . b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m x k] . b^T` with `b` stored as `[n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(LasynError::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, self.value(a), false, self.value(b), trans_b, 0.0, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a vector along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        if self.value(bias).len() != cols {
            return Err(LasynError::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.value(x).to_vec();
        kernels::add_bias_rows(&mut out, self.value(bias));
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), &[x])
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(LasynError::Dimension {
                op: "gather",
                lhs: vec![rows, cols],
                rhs: vec![bad],
            });
        }
        if ids.is_empty() {
            return Err(LasynError::Graph("gather with no ids".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Concatenation along the first axis of 2-D tensors.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, cols) = self.dims2(parts[0], "concat")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            if c != cols {
                return Err(LasynError::Dimension {
                    op: "concat",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, cols], out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(LasynError::Dimension {
                op: "slice_rows",
                lhs: vec![rows, cols],
                rhs: vec![start, len],
            });
        }
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(vec![len, cols], out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape, self.value(x).len()).map_err(|_| LasynError::Dimension {
            op: "reshape",
            lhs: self.shape(x).to_vec(),
            rhs: shape.clone(),
        })?;
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    /// Inverted dropout. A rate of zero is the identity and records nothing.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(LasynError::config(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| LasynError::Graph("dropout requires a seeded graph".into()))?;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(LasynError::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (y, xhat, rstd) =
            kernels::layer_norm_rows(self.value(x), self.value(gain), self.value(bias), eps);
        Ok(self.push(
            self.shape(x).to_vec(),
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Log-softmax along the trailing axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let out = kernels::log_softmax_rows(self.value(x), cols);
        self.push(self.shape(x).to_vec(), out, Op::LogSoftmax(x), &[x])
    }

    /// Multi-head scaled dot-product attention with padding and causal masks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let (qr, width) = self.dims2(q, "attention")?;
        let (kr, kw) = self.dims2(k, "attention")?;
        self.same_shape(k, v, "attention")?;
        if qr != layout.batch * layout.q_len
            || kr != layout.batch * layout.k_len
            || kw != width
            || width % layout.heads != 0
            || layout.key_lengths.len() != layout.batch
        {
            return Err(LasynError::Dimension {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        let (out, probs) =
            kernels::attention_forward(self.value(q), self.value(k), self.value(v), width, &layout);
        Ok(self.push(
            vec![qr, width],
            out,
            Op::Attention {
                q,
                k,
                v,
                probs,
                layout,
            },
            &[q, k, v],
        ))
    }

    /// `out[r * Z + z] = rows[r] + offsets[z]` for `rows [R x d]`, `offsets [Z x d]`.
    pub fn outer_add(&mut self, rows: Var, offsets: Var) -> Result<Var> {
        let (r, d) = self.dims2(rows, "outer_add")?;
        let (z, d2) = self.dims2(offsets, "outer_add")?;
        if d != d2 {
            return Err(LasynError::Dimension {
                op: "outer_add",
                lhs: vec![r, d],
                rhs: vec![z, d2],
            });
        }
        let x = self.value(rows);
        let o = self.value(offsets);
        let mut out = Vec::with_capacity(r * z * d);
        for ri in 0..r {
            let xr = &x[ri * d..(ri + 1) * d];
            for zi in 0..z {
                out.extend(xr.iter().zip(&o[zi * d..(zi + 1) * d]).map(|(a, b)| a + b));
            }
        }
        Ok(self.push(vec![r * z, d], out, Op::OuterAdd { rows, offsets }, &[rows, offsets]))
    }

    /// Element gather by flat index into a tensor of the given shape.
    pub fn take(&mut self, x: Var, idx: &[usize], shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape, idx.len())?;
        let n = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(LasynError::Dimension {
                op: "take",
                lhs: self.shape(x).to_vec(),
                rhs: vec![bad],
            });
        }
        let v = self.value(x);
        let out = idx.iter().map(|&i| v[i]).collect();
        Ok(self.push(shape, out, Op::Take { x, idx: idx.to_vec() }, &[x]))
    }

    /// Row-wise `ln sum exp` of a 2-D tensor, giving shape `[rows]`.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "log_sum_exp_rows")?;
        let out = self.value(x).chunks_exact(c).map(kernels::log_sum_exp).collect();
        Ok(self.push(vec![r], out, Op::LogSumExpRows(x), &[x]))
    }

    /// `sum_i w_i x_i` with constant weights; returns a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(LasynError::Dimension {
                op: "weighted_sum",
                lhs: self.shape(x).to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = self.value(x).iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(vec![1], vec![s], Op::WeightedSum { x, weights }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, vec![1.0; n]).expect("weights sized to input")
    }

    /// `-sum_r w_r * logp[r, targets[r]]` over rows of a log-probability matrix.
    pub fn cross_entropy(&mut self, logp: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (r, c) = self.dims2(logp, "cross_entropy")?;
        if targets.len() != r || weights.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(LasynError::Dimension {
                op: "cross_entropy",
                lhs: vec![r, c],
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let v = self.value(logp);
        let loss = -targets
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (&t, &w))| w * v[i * c + t])
            .sum::<f64>();
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[logp],
        ))
    }

    /// Reverse pass from a scalar loss. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(LasynError::Graph("backward on a no-grad graph".into()));
        }
        if self.backward_done {
            return Err(LasynError::Graph(
                "backward already ran on this graph; rebuild it with a new forward".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(LasynError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward with respect to `v`; zeros when the
    /// loss did not depend on it.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; self.value(v).len()],
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()]);
            f(slot);
        };
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = node.shape[1];
                let av = &nodes[a.0].data;
                let bv = &nodes[b.0].data;
                // grad_a = g . op(b)^T
                acc(*a, &mut |da| kernels::gemm(m, n, k, 1.0, g, false, bv, !*trans_b, 1.0, da));
                if *trans_b {
                    // b stored [n x k]: grad_b = g^T . a
                    acc(*b, &mut |db| kernels::gemm(n, m, k, 1.0, g, true, av, false, 1.0, db));
                } else {
                    acc(*b, &mut |db| kernels::gemm(k, m, n, 1.0, av, true, g, false, 1.0, db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    for row in g.chunks_exact(d.len()) {
                        add_into(d, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].data;
                let bv = &nodes[b.0].data;
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv.iter()) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av.iter()) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| {
                for (d, g) in d.iter_mut().zip(g) {
                    *d += s * g;
                }
            }),
            Op::Gather { table, ids } => {
                let cols = node.shape[1];
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].data.len();
                    acc(*p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.shape[1];
                let at = start * cols;
                acc(*x, &mut |d| add_into(&mut d[at..at + g.len()], g));
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].data;
                acc(*x, &mut |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv.iter()) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |d| {
                for ((d, g), m) in d.iter_mut().zip(g).zip(mask) {
                    *d += g * m;
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = &nodes[gain.0].data;
                let cols = gv.len();
                acc(*x, &mut |d| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dx = 0.0;
                        let mut mean_dx_x = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            mean_dx += dxh;
                            mean_dx_x += dxh * xr[c];
                        }
                        mean_dx /= cols as f64;
                        mean_dx_x /= cols as f64;
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            d[r * cols + c] += rs * (dxh - mean_dx - xr[c] * mean_dx_x);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (gr, xr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for c in 0..cols {
                            d[c] += gr[c] * xr[c];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for gr in g.chunks_exact(cols) {
                        add_into(d, gr);
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let cols = *node.shape.last().unwrap();
                let y = &node.data;
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let total: f64 = gr.iter().sum();
                        for c in 0..cols {
                            dr[c] += gr[c] - yr[c].exp() * total;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                layout,
            } => {
                let width = node.shape[1];
                let mut dq = vec![0.0; nodes[q.0].data.len()];
                let mut dk = vec![0.0; nodes[k.0].data.len()];
                let mut dv = vec![0.0; nodes[v.0].data.len()];
                kernels::attention_backward(
                    &nodes[q.0].data,
                    &nodes[k.0].data,
                    &nodes[v.0].data,
                    probs,
                    g,
                    width,
                    layout,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                acc(*q, &mut |d| add_into(d, &dq));
                acc(*k, &mut |d| add_into(d, &dk));
                acc(*v, &mut |d| add_into(d, &dv));
            }
            Op::OuterAdd { rows, offsets } => {
                let d = node.shape[1];
                let z = nodes[offsets.0].shape[0];
                let r = nodes[rows.0].shape[0];
                acc(*rows, &mut |dr| {
                    for ri in 0..r {
                        for zi in 0..z {
                            let at = (ri * z + zi) * d;
                            add_into(&mut dr[ri * d..(ri + 1) * d], &g[at..at + d]);
                        }
                    }
                });
                acc(*offsets, &mut |doff| {
                    for ri in 0..r {
                        for zi in 0..z {
                            let at = (ri * z + zi) * d;
                            add_into(&mut doff[zi * d..(zi + 1) * d], &g[at..at + d]);
                        }
                    }
                });
            }
            Op::Take { x, idx } => acc(*x, &mut |d| {
                for (gi, &i) in g.iter().zip(idx) {
                    d[i] += gi;
                }
            }),
            Op::LogSumExpRows(x) => {
                let cols = nodes[x.0].shape[1];
                let xv = &nodes[x.0].data;
                let out = &node.data;
                acc(*x, &mut |d| {
                    for (r, (gr, lse)) in g.iter().zip(out.iter()).enumerate() {
                        for c in 0..cols {
                            d[r * cols + c] += gr * (xv[r * cols + c] - lse).exp();
                        }
                    }
                });
            }
            Op::WeightedSum { x, weights } => acc(*x, &mut |d| {
                for (d, w) in d.iter_mut().zip(weights) {
                    *d += g[0] * w;
                }
            }),
            Op::CrossEntropy {
                logp,
                targets,
                weights,
            } => {
                let cols = nodes[logp.0].shape[1];
                acc(*logp, &mut |d| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        d[r * cols + t] -= g[0] * w;
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> Var {
        g.leaf(&Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut g = Graph::new();
        let i2 = leaf(&mut g, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut g, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
        let x = leaf(&mut g, vec![1, 1], vec![2.0]);
        let y = leaf(&mut g, vec![1, 1], vec![3.0]);
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut g, vec![2, 3], vec![0.0; 6]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn product_of_scalars_backward() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![3.0]);
        let y = leaf(&mut g, vec![1], vec![-2.0]);
        let p = g.mul(x, y).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x), vec![-2.0]);
        assert_eq!(g.grad(y), vec![3.0]);
    }

    #[test]
    fn log_softmax_singleton_has_zero_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1], vec![0.7]);
        let ls = g.log_softmax(x);
        let s = g.sum(ls);
        g.backward(s).unwrap();
        assert_eq!(g.value(ls), &[0.0]);
        assert_eq!(g.grad(x), vec![0.0]);
    }

    #[test]
    fn log_softmax_examples() {
        let mut g = Graph::no_grad();
        let x = g.constant(vec![3, 2], vec![0.0, 0.0, 0.0, 2f64.ln(), 1000.0, 0.0]).unwrap();
        let y = g.log_softmax(x);
        let v = g.value(y);
        assert!((v[0] - 0.5f64.ln()).abs() < 1e-15);
        assert!((v[1] - 0.5f64.ln()).abs() < 1e-15);
        assert!((v[2] - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((v[3] - (2.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!(v[4].is_finite() && v[5].is_finite());
        assert!(((v[4].exp() + v[5].exp()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::no_grad();
        let x = g.constant(vec![2, 2], vec![5.0, 5.0, 1.0, 3.0]).unwrap();
        let gain = g.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let bias = g.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let v = g.value(y);
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] + 1.0).abs() < 1e-5 && (v[3] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn unused_leaf_gets_exact_zero_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let unused = leaf(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused), vec![0.0; 3]);
    }

    #[test]
    fn second_backward_and_non_scalar_are_errors() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        assert!(g.backward(x).is_err());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err());
        let mut ng = Graph::no_grad();
        let y = ng.constant(vec![1], vec![1.0]).unwrap();
        assert!(ng.backward(y).is_err());
    }

    #[test]
    fn dropout_needs_rng_and_zero_rate_is_identity() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![4], vec![1.0; 4]);
        assert_eq!(g.dropout(x, 0.0).unwrap(), x);
        assert!(g.dropout(x, 0.5).is_err());
    }
}
