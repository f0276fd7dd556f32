//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as a node in creation order, which is a
//! topological order, so [`Graph::backward`] is a single reverse sweep. Shapes
//! are never broadcast implicitly: the only broadcasting op is
//! [`Graph::add_row`], which adds a bias vector to every row.

mod check;
pub mod kernels;
mod tensor;

use std::ops::Range;

use thiserror::Error;

pub use check::{grad_check, grad_check_many};
use kernels::{gemm, Layout};
pub use tensor::Tensor;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Rows with a smaller L2 norm cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes}")]
    ShapeMismatch { op: &'static str, shapes: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: row {row} has norm below {MIN_NORM:e}")]
    DegenerateNorm { op: &'static str, row: usize },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" vs "),
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, range: Range<usize> },
    GatherRows { input: Var, indices: Vec<usize> },
    Transpose(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Sqrt(Var),
    Softmax { input: Var, axis: usize },
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    L2Normalize { input: Var, norms: Vec<f64> },
    RowDot(Var, Var),
    Cosine(Var, Var),
    SqDist(Var, Var),
    CrossEntropy { logits: Var, rows: Vec<(usize, usize)>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`]. Nodes that
    /// require a gradient but were not reached report zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = node.grad.clone().unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient matches value shape"))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), AutodiffError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op,
                reason: format!("expected a matrix, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::N, self.value(b).data(), Layout::N, 0.0, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, &[self.shape(a), self.shape(b)]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds vector `b` (length = last axis of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let c = *self.shape(a).last().unwrap_or(&0);
        if self.shape(b) != [c] || self.shape(a).is_empty() {
            return Err(mismatch("add_row", &[self.shape(a), self.shape(b)]));
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(c.max(1)) {
            add_into(row, &bias);
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, b), &[a, b]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| f(x)).collect())
            .expect("map preserves shape");
        self.push(value, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Ln(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let Some(&first) = inputs.first() else {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &[&base, s]));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * n..(o + 1) * n]);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Indices `range` of `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, range: Range<usize>) -> Result<Var, AutodiffError> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || range.start > range.end || range.end > shape[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                reason: format!("range {range:?} on axis {axis} of shape {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * range.len() * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + range.start * inner..base + range.end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = range.len();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Slice { input, axis, range }, &[input]))
    }

    /// Rows of a matrix (or entries of a vector) at `indices`, repeats allowed.
    pub fn gather_rows(&mut self, input: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(input).to_vec();
        if shape.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                reason: format!("index out of range for shape {shape:?}"),
            });
        }
        let w: usize = shape[1..].iter().product();
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                input,
                indices: indices.to_vec(),
            },
            &[input],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), &[a]))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax",
                reason: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut data = self.value(input).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..n {
                    let e = (data[idx(k)] - max).exp();
                    data[idx(k)] = e;
                    sum += e;
                }
                for k in 0..n {
                    data[idx(k)] /= sum;
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Softmax { input, axis }, &[input]))
    }

    /// Normalizes every row over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(input).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", &[&shape, self.shape(gamma), self.shape(beta)]));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for k in 0..d {
                let h = (row[k] - mean) * is;
                xhat[r * d + k] = h;
                out[r * d + k] = h * g[k] + b[k];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let Some((&d, outer)) = shape.split_last() else {
            return Err(AutodiffError::InvalidArgument {
                op: "sum_last",
                reason: "scalar input".into(),
            });
        };
        let data = if d == 0 {
            vec![0.0; outer.iter().product()]
        } else {
            self.value(a).data().chunks_exact(d).map(|r| r.iter().sum()).collect()
        };
        let value = Tensor::new(outer.to_vec(), data)?;
        Ok(self.push(value, Op::SumLast(a), &[a]))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(input).to_vec();
        let d = *shape.last().ok_or(AutodiffError::InvalidArgument {
            op: "l2_normalize",
            reason: "scalar input".into(),
        })?;
        let x = self.value(input).data();
        let mut norms = Vec::with_capacity(x.len() / d.max(1));
        let mut out = Vec::with_capacity(x.len());
        for (r, row) in x.chunks_exact(d.max(1)).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n >= MIN_NORM) {
                return Err(AutodiffError::DegenerateNorm { op: "l2_normalize", row: r });
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::L2Normalize { input, norms }, &[input]))
    }

    fn rowwise_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), AutodiffError> {
        let (m, d) = self.matrix_dims(op, a)?;
        if self.shape(b) != [m, d] {
            return Err(mismatch(op, &[self.shape(a), self.shape(b)]));
        }
        Ok((m, d))
    }

    /// Row-wise dot products of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, d) = self.rowwise_pair("row_dot", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let data = (0..m)
            .map(|i| (0..d).map(|k| x[i * d + k] * y[i * d + k]).sum())
            .collect();
        Ok(self.push(Tensor::vector(data), Op::RowDot(a, b), &[a, b]))
    }

    /// Row-wise cosine similarity.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, d) = self.rowwise_pair("cosine", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m);
        for i in 0..m {
            let (xr, yr) = (&x[i * d..(i + 1) * d], &y[i * d..(i + 1) * d]);
            let nx = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = yr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx < MIN_NORM || ny < MIN_NORM {
                return Err(AutodiffError::DegenerateNorm { op: "cosine", row: i });
            }
            let dot: f64 = xr.iter().zip(yr).map(|(p, q)| p * q).sum();
            data.push(dot / (nx * ny));
        }
        Ok(self.push(Tensor::vector(data), Op::Cosine(a, b), &[a, b]))
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (`m x f`)
    /// and `b` (`n x f`), giving `m x n`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, f) = self.matrix_dims("sq_dist", a)?;
        let (n, f2) = self.matrix_dims("sq_dist", b)?;
        if f != f2 {
            return Err(mismatch("sq_dist", &[self.shape(a), self.shape(b)]));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let xr = &x[i * f..(i + 1) * f];
            for j in 0..n {
                let yr = &y[j * f..(j + 1) * f];
                data[i * n + j] = xr.iter().zip(yr).map(|(p, q)| (p - q) * (p - q)).sum();
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::SqDist(a, b), &[a, b]))
    }

    /// Softmax cross-entropy over selected rows of a logit matrix, in fused
    /// log-sum-exp form.
    ///
    /// Each `(row, target)` entry yields `logsumexp(logits[row, allowed]) -
    /// logits[row, target]`, where `allowed` is the row of `mask` (all columns
    /// when `mask` is `None`) plus the target itself. Returns one loss per
    /// entry.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        rows: &[(usize, usize)],
        mask: Option<&[bool]>,
    ) -> Result<Var, AutodiffError> {
        let (m, n) = self.matrix_dims("cross_entropy", logits)?;
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(AutodiffError::InvalidArgument {
                    op: "cross_entropy",
                    reason: format!("mask has {} entries for a {m} x {n} logit matrix", mask.len()),
                });
            }
        }
        if rows.iter().any(|&(r, t)| r >= m || t >= n) {
            return Err(AutodiffError::InvalidArgument {
                op: "cross_entropy",
                reason: "row or target out of range".into(),
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; rows.len() * n];
        let mut losses = Vec::with_capacity(rows.len());
        for (e, &(r, t)) in rows.iter().enumerate() {
            let row = &x[r * n..(r + 1) * n];
            let allowed = |c: usize| c == t || mask.map_or(true, |mk| mk[r * n + c]);
            let max = (0..n).filter(|&c| allowed(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[e * n..(e + 1) * n];
            let mut sum = 0.0;
            for c in (0..n).filter(|&c| allowed(c)) {
                p[c] = (row[c] - max).exp();
                sum += p[c];
            }
            for v in p.iter_mut() {
                *v /= sum;
            }
            losses.push(max + sum.ln() - row[t]);
        }
        Ok(self.push(
            Tensor::vector(losses),
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`, seeding its gradient with 1.
    /// Gradients from any earlier sweep are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let shape = self.shape(loss).to_vec();
        if !shape.is_empty() {
            return Err(AutodiffError::NotScalar(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (v, delta) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => add_into(acc, &delta),
                    None => node.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `idx` given its output gradient `g`.
    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, Layout::N, val(*b), Layout::T, 0.0, &mut da);
                    res.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), Layout::T, g, Layout::N, 0.0, &mut db);
                    res.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                res.push((*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect()));
                res.push((*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect()));
            }
            Op::AddRow(a, b) => {
                res.push((*a, g.to_vec()));
                if self.wants(*b) {
                    let c = self.shape(*b)[0];
                    let mut db = vec![0.0; c];
                    for row in g.chunks_exact(c.max(1)) {
                        add_into(&mut db, row);
                    }
                    res.push((*b, db));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.iter().map(|v| v * c).collect())),
            Op::AddScalar(a) => res.push((*a, g.to_vec())),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    res.push((v, d));
                }
            }
            Op::Slice { input, axis, range } => {
                let (outer, len, inner) = split_axis(self.shape(*input), *axis);
                let mut d = vec![0.0; outer * len * inner];
                let w = range.len() * inner;
                for o in 0..outer {
                    let base = (o * len + range.start) * inner;
                    d[base..base + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                res.push((*input, d));
            }
            Op::GatherRows { input, indices } => {
                let shape = self.shape(*input);
                let w: usize = shape[1..].iter().product();
                let mut d = vec![0.0; shape[0] * w];
                for (k, &i) in indices.iter().enumerate() {
                    add_into(&mut d[i * w..(i + 1) * w], &g[k * w..(k + 1) * w]);
                }
                res.push((*input, d));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                res.push((*a, d));
            }
            Op::Exp(a) => res.push((*a, g.iter().zip(out).map(|(x, y)| x * y).collect())),
            Op::Ln(a) => res.push((*a, g.iter().zip(val(*a)).map(|(x, y)| x / y).collect())),
            Op::Relu(a) => res.push((
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                    .collect(),
            )),
            Op::Sqrt(a) => res.push((*a, g.iter().zip(out).map(|(x, y)| x / (2.0 * y)).collect())),
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut d = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        for k in 0..n {
                            d[idx(k)] = out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                res.push((*input, d));
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma);
                let d = gam.len();
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for k in 0..d {
                        dg[k] += gr[k] * hr[k];
                        db[k] += gr[k];
                        let dh = gr[k] * gam[k];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[k];
                    }
                    for k in 0..d {
                        let dh = gr[k] * gam[k];
                        dx[r * d + k] = is / d as f64 * (d as f64 * dh - sum_dh - hr[k] * sum_dh_h);
                    }
                }
                res.push((*input, dx));
                res.push((*gamma, dg));
                res.push((*beta, db));
            }
            Op::Sum(a) => res.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                res.push((*a, vec![g[0] / n.max(1) as f64; n]));
            }
            Op::SumLast(a) => {
                let d = *self.shape(*a).last().unwrap_or(&1);
                let mut da = Vec::with_capacity(g.len() * d);
                for &gi in g {
                    da.extend(std::iter::repeat(gi).take(d));
                }
                res.push((*a, da));
            }
            Op::L2Normalize { input, norms } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; out.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let y = &out[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for k in 0..d {
                        dx[r * d + k] = (gr[k] - y[k] * dot) / n;
                    }
                }
                res.push((*input, dx));
            }
            Op::RowDot(a, b) => {
                let d = self.shape(*a)[1];
                let (x, y) = (val(*a), val(*b));
                let mut da = vec![0.0; x.len()];
                let mut db = vec![0.0; y.len()];
                for (i, &gi) in g.iter().enumerate() {
                    for k in 0..d {
                        da[i * d + k] = gi * y[i * d + k];
                        db[i * d + k] = gi * x[i * d + k];
                    }
                }
                res.push((*a, da));
                res.push((*b, db));
            }
            Op::Cosine(a, b) => {
                let d = self.shape(*a)[1];
                let (x, y) = (val(*a), val(*b));
                let mut da = vec![0.0; x.len()];
                let mut db = vec![0.0; y.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let (xr, yr) = (&x[i * d..(i + 1) * d], &y[i * d..(i + 1) * d]);
                    let nx = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ny = yr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let c = out[i];
                    for k in 0..d {
                        da[i * d + k] = gi * (yr[k] / (nx * ny) - c * xr[k] / (nx * nx));
                        db[i * d + k] = gi * (xr[k] / (nx * ny) - c * yr[k] / (ny * ny));
                    }
                }
                res.push((*a, da));
                res.push((*b, db));
            }
            Op::SqDist(a, b) => {
                let (m, f) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (x, y) = (val(*a), val(*b));
                let mut da = vec![0.0; m * f];
                let mut db = vec![0.0; n * f];
                for i in 0..m {
                    for j in 0..n {
                        let gij = 2.0 * g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..f {
                            let diff = gij * (x[i * f + k] - y[j * f + k]);
                            da[i * f + k] += diff;
                            db[j * f + k] -= diff;
                        }
                    }
                }
                res.push((*a, da));
                res.push((*b, db));
            }
            Op::CrossEntropy { logits, rows, probs } => {
                let n = self.shape(*logits)[1];
                let mut d = vec![0.0; self.value(*logits).numel()];
                for (e, &(r, t)) in rows.iter().enumerate() {
                    let p = &probs[e * n..(e + 1) * n];
                    let dr = &mut d[r * n..(r + 1) * n];
                    for c in 0..n {
                        dr[c] += g[e] * p[c];
                    }
                    dr[t] -= g[e];
                }
                res.push((*logits, d));
            }
        }
        res
    }
}
