//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in execution
//! order, which is already a topological order. [`Graph::backward`] walks
//! the tape in reverse once and accumulates gradients into the leaves that
//! were created with `requires_grad`.
//!
//! ```
//! use poformer::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, normal_cdf, normal_pdf, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Exact `x·Φ(x)` form.
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => x * normal_cdf(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => normal_cdf(x) + x * normal_pdf(x),
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Act(Var, Activation),
    DepthwiseConv {
        x: Var,
        kernel: Var,
    },
    MeanRows(Var),
    StdRows {
        x: Var,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ContextGather {
        x: Var,
        offsets: Vec<isize>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow(a, b) | Op::MulRow(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::Act(x, _)
            | Op::MeanRows(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::DepthwiseConv { x, kernel } => vec![*x, *kernel],
            Op::StdRows { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::ContextGather { x, .. }
            | Op::NormalizeRows { x, .. } => vec![*x],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recorded computation. Confined to one thread; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, zeros if no backward pass reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        if cfg!(debug_assertions)
            && !value.is_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.is_finite())
        {
            panic!("non-finite output from finite inputs");
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[m, n] => Ok((m, n)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "transpose")?;
        let value = Tensor::new(&[n, m], transpose(self.value(x).data(), m, n))?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    fn row_broadcast_check(&self, x: Var, v: Var, op: &'static str) -> Result<usize> {
        let n = self.value(x).last_dim();
        if self.value(v).numel() != n || self.shape(v).len() > 2 {
            return Err(Error::shape(op, self.shape(x), self.shape(v)));
        }
        Ok(n)
    }

    /// `x + b` with `b` broadcast over every vector along the last axis.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.row_broadcast_check(x, b, "add_row")?;
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (y, &bj) in row.iter_mut().zip(&bias) {
                *y += bj;
            }
        }
        Ok(self.push(value, Op::AddRow(x, b)))
    }

    /// `x ⊙ g` with `g` broadcast over every vector along the last axis.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let n = self.row_broadcast_check(x, g, "mul_row")?;
        let gain = self.value(g).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (y, &gj) in row.iter_mut().zip(&gain) {
                *y *= gj;
            }
        }
        Ok(self.push(value, Op::MulRow(x, g)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "softmax_rows")?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(value, Op::Softmax(x)))
    }

    /// Normalizes every vector along the last axis to zero mean and unit
    /// population variance, then applies `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(beta)));
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let xv = self.value(x);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.outer_len());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * istd;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        self.push(value, Op::Act(x, kind))
    }

    /// Per-channel 1-D convolution over time with "same" zero padding.
    ///
    /// `x` is `L×d`, `kernel` is `k×d` with odd `k`; output row `t` is
    /// `Σ_j kernel[j] ⊙ x[t + j − (k−1)/2]`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (len, d) = self.dims2(x, "depthwise_conv1d")?;
        let (k, dk) = self.dims2(kernel, "depthwise_conv1d")?;
        if d != dk {
            return Err(Error::shape("depthwise_conv1d", self.shape(x), self.shape(kernel)));
        }
        if k % 2 == 0 {
            return Err(Error::invalid(format!("depthwise kernel size must be odd, got {k}")));
        }
        let out = conv1d_forward(self.value(x).data(), self.value(kernel).data(), len, d, k);
        let value = Tensor::new(&[len, d], out)?;
        Ok(self.push(value, Op::DepthwiseConv { x, kernel }))
    }

    /// Per-column mean over rows, as a `1×d` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (len, d) = self.dims2(x, "mean_rows")?;
        let mut out = vec![0.0; d];
        for row in self.value(x).data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= len as f64;
        }
        let value = Tensor::new(&[1, d], out)?;
        Ok(self.push(value, Op::MeanRows(x)))
    }

    /// Per-column population standard deviation over rows, `sqrt(var + eps)`.
    pub fn std_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (len, d) = self.dims2(x, "std_rows")?;
        let data = self.value(x).data();
        let mut mean = vec![0.0; d];
        for row in data.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= len as f64;
        }
        let mut var = vec![0.0; d];
        for row in data.chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / len as f64 + eps).sqrt()).collect();
        let value = Tensor::new(&[1, d], std.clone())?;
        Ok(self.push(value, Op::StdRows { x, mean, std }))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (m, nx) = self.dims2(x, "concat_rows")?;
            if nx != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(x)));
            }
            rows += m;
            out.extend_from_slice(self.value(x).data());
        }
        let value = Tensor::new(&[rows, n], out)?;
        Ok(self.push(value, Op::ConcatRows(xs.to_vec())))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (mx, n) = self.dims2(x, "concat_cols")?;
            if mx != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(x)));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &n) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * n..(i + 1) * n]);
            }
        }
        let value = Tensor::new(&[m, total], out)?;
        Ok(self.push(value, Op::ConcatCols(xs.to_vec())))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start >= end || end > m {
            return Err(Error::invalid(format!("row range {start}..{end} of {m} rows")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let value = Tensor::new(&[end - start, n], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::invalid(format!("column range {start}..{end} of {n} columns")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let value = Tensor::new(&[m, end - start], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    /// Splices the frames at each temporal offset side by side:
    /// row `t` of the `T×(|offsets|·F)` output is `x[t+o₁] ⧺ x[t+o₂] ⧺ …`,
    /// with zero rows outside `0..T`.
    pub fn context_gather(&mut self, x: Var, offsets: &[isize]) -> Result<Var> {
        let (len, f) = self.dims2(x, "context_gather")?;
        if offsets.is_empty() {
            return Err(Error::invalid("empty context"));
        }
        let width = offsets.len() * f;
        let src = self.value(x).data();
        let mut out = vec![0.0; len * width];
        for t in 0..len {
            for (c, &o) in offsets.iter().enumerate() {
                let s = t as isize + o;
                if s < 0 || s >= len as isize {
                    continue;
                }
                let s = s as usize;
                out[t * width + c * f..t * width + (c + 1) * f]
                    .copy_from_slice(&src[s * f..(s + 1) * f]);
            }
        }
        let value = Tensor::new(&[len, width], out)?;
        Ok(self.push(
            value,
            Op::ContextGather {
                x,
                offsets: offsets.to_vec(),
            },
        ))
    }

    /// Scales every row to unit L2 norm, `x / sqrt(‖x‖² + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, n) = self.dims2(x, "normalize_rows")?;
        let mut value = self.value(x).clone();
        let mut norms = Vec::new();
        for row in value.data_mut().chunks_mut(n) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            norms.push(norm);
            for v in row {
                *v /= norm;
            }
        }
        Ok(self.push(value, Op::NormalizeRows { x, norms }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean over rows of `logsumexp(z) − z[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let (argmax, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, z)| if z > best.1 { (j, z) } else { best });
            // ln Σ e^{z−max} = ln(1 + rest); ln_1p keeps tiny losses accurate
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != argmax)
                .map(|(_, z)| (z - max).exp())
                .sum();
            let log_sum = rest.ln_1p();
            let lse = max + log_sum;
            total += (max - row[y]) + log_sum;
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        let value = Tensor::scalar(total / b as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Accumulates `∂loss/∂leaf` into every `requires_grad` leaf reachable
    /// from `loss`. Gradients add up across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(self.value(loss).map(|_| 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            if let Op::Leaf = self.nodes[id].op {
                match &mut self.nodes[id].grad {
                    Some(acc) => acc.add_assign(&dy),
                    slot @ None => *slot = Some(dy),
                }
                continue;
            }
            for (input, g) in self.local_grads(id, &dy) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `dy`.
    fn local_grads(&self, id: usize, dy: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape(), data).expect("shape");
        let dyd = dy.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().expect("rank 2");
                let n = val(*b).last_dim();
                let mut out = Vec::new();
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(dyd, val(*b).data(), &mut da, m, n, k);
                    out.push((*a, like(*a, da)));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(val(*a).data(), dyd, &mut db, k, m, n);
                    out.push((*b, like(*b, db)));
                }
                out
            }
            Op::Transpose(x) => {
                let (m, n) = val(*x).dims2().expect("rank 2");
                vec![(*x, like(*x, transpose(dyd, n, m)))]
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, dy.map(|v| -v))],
            Op::Mul(a, b) => {
                let da = dyd.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                let db = dyd.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::AddRow(x, b) => {
                let n = val(*x).last_dim();
                let mut db = vec![0.0; n];
                for row in dyd.chunks(n) {
                    for (s, g) in db.iter_mut().zip(row) {
                        *s += g;
                    }
                }
                vec![(*x, dy.clone()), (*b, like(*b, db))]
            }
            Op::MulRow(x, g) => {
                let n = val(*x).last_dim();
                let gain = val(*g).data();
                let mut dx = dyd.to_vec();
                for row in dx.chunks_mut(n) {
                    for (d, gj) in row.iter_mut().zip(gain) {
                        *d *= gj;
                    }
                }
                let mut dg = vec![0.0; n];
                for (row, xrow) in dyd.chunks(n).zip(val(*x).data().chunks(n)) {
                    for ((s, d), xv) in dg.iter_mut().zip(row).zip(xrow) {
                        *s += d * xv;
                    }
                }
                vec![(*x, like(*x, dx)), (*g, like(*g, dg))]
            }
            Op::Scale(x, c) => vec![(*x, dy.map(|v| v * c))],
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                let mut dx = Vec::with_capacity(dyd.len());
                for (grow, yrow) in dyd.chunks(n).zip(node.value.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(g, y)| y * (g - dot)));
                }
                vec![(*x, like(*x, dx))]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = val(*x).last_dim();
                let g = val(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = Vec::with_capacity(dyd.len());
                for ((grow, hrow), istd) in dyd.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                        let dh = grow[j] * g[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = grow[j] * g[j];
                        dx.push(istd * (dh - mean_dh - hrow[j] * mean_dh_h));
                    }
                }
                vec![
                    (*x, like(*x, dx)),
                    (*gamma, like(*gamma, dgamma)),
                    (*beta, like(*beta, dbeta)),
                ]
            }
            Op::Act(x, kind) => {
                let dx = dyd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| g * kind.derivative(v))
                    .collect();
                vec![(*x, like(*x, dx))]
            }
            Op::DepthwiseConv { x, kernel } => {
                let (len, d) = val(*x).dims2().expect("rank 2");
                let k = val(*kernel).shape()[0];
                let half = (k / 2) as isize;
                let xd = val(*x).data();
                let kd = val(*kernel).data();
                let mut dx = vec![0.0; len * d];
                let mut dk = vec![0.0; k * d];
                for t in 0..len {
                    for j in 0..k {
                        let s = t as isize + j as isize - half;
                        if s < 0 || s >= len as isize {
                            continue;
                        }
                        let s = s as usize;
                        for c in 0..d {
                            let g = dyd[t * d + c];
                            dx[s * d + c] += kd[j * d + c] * g;
                            dk[j * d + c] += xd[s * d + c] * g;
                        }
                    }
                }
                vec![(*x, like(*x, dx)), (*kernel, like(*kernel, dk))]
            }
            Op::MeanRows(x) => {
                let (len, d) = val(*x).dims2().expect("rank 2");
                let mut dx = Vec::with_capacity(len * d);
                for _ in 0..len {
                    dx.extend(dyd.iter().map(|g| g / len as f64));
                }
                vec![(*x, like(*x, dx))]
            }
            Op::StdRows { x, mean, std } => {
                let (len, d) = val(*x).dims2().expect("rank 2");
                let mut dx = Vec::with_capacity(len * d);
                for row in val(*x).data().chunks(d) {
                    for c in 0..d {
                        dx.push(dyd[c] * (row[c] - mean[c]) / (len as f64 * std[c]));
                    }
                }
                vec![(*x, like(*x, dx))]
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let len = val(x).numel();
                    if wants(x) {
                        out.push((x, like(x, dyd[offset..offset + len].to_vec())));
                    }
                    offset += len;
                }
                out
            }
            Op::ConcatCols(xs) => {
                let total = node.value.last_dim();
                let mut col = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let (m, n) = val(x).dims2().expect("rank 2");
                    if wants(x) {
                        let mut dx = Vec::with_capacity(m * n);
                        for i in 0..m {
                            dx.extend_from_slice(&dyd[i * total + col..i * total + col + n]);
                        }
                        out.push((x, like(x, dx)));
                    }
                    col += n;
                }
                out
            }
            Op::SliceRows { x, start } => {
                let n = val(*x).last_dim();
                let mut dx = vec![0.0; val(*x).numel()];
                dx[start * n..start * n + dyd.len()].copy_from_slice(dyd);
                vec![(*x, like(*x, dx))]
            }
            Op::SliceCols { x, start } => {
                let (m, n) = val(*x).dims2().expect("rank 2");
                let w = node.value.last_dim();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(&dyd[i * w..(i + 1) * w]);
                }
                vec![(*x, like(*x, dx))]
            }
            Op::ContextGather { x, offsets } => {
                let (len, f) = val(*x).dims2().expect("rank 2");
                let width = offsets.len() * f;
                let mut dx = vec![0.0; len * f];
                for t in 0..len {
                    for (c, &o) in offsets.iter().enumerate() {
                        let s = t as isize + o;
                        if s < 0 || s >= len as isize {
                            continue;
                        }
                        let s = s as usize;
                        for j in 0..f {
                            dx[s * f + j] += dyd[t * width + c * f + j];
                        }
                    }
                }
                vec![(*x, like(*x, dx))]
            }
            Op::NormalizeRows { x, norms } => {
                let n = val(*x).last_dim();
                let mut dx = Vec::with_capacity(dyd.len());
                for ((grow, xrow), &norm) in dyd.chunks(n).zip(val(*x).data().chunks(n)).zip(norms)
                {
                    let dot: f64 = grow.iter().zip(xrow).map(|(g, v)| g * v).sum();
                    let n3 = norm * norm * norm;
                    dx.extend(grow.iter().zip(xrow).map(|(g, v)| g / norm - v * dot / n3));
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Sum(x) => {
                let g = dyd[0];
                vec![(*x, val(*x).map(|_| g))]
            }
            Op::Mean(x) => {
                let g = dyd[0] / val(*x).numel() as f64;
                vec![(*x, val(*x).map(|_| g))]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).last_dim();
                let b = labels.len() as f64;
                let g = dyd[0];
                let mut dz = probs.clone();
                for (row, &y) in dz.chunks_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= g / b;
                    }
                }
                vec![(*logits, like(*logits, dz))]
            }
        }
    }
}

fn transpose(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn conv1d_forward(x: &[f64], kernel: &[f64], len: usize, d: usize, k: usize) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut out = vec![0.0; len * d];
    for t in 0..len {
        for j in 0..k {
            let s = t as isize + j as isize - half;
            if s < 0 || s >= len as isize {
                continue;
            }
            let s = s as usize;
            for c in 0..d {
                out[t * d + c] += kernel[j * d + c] * x[s * d + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(mat(&[&[5.0], &[6.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &mat(&[&[17.0], &[39.0]]));

        let i = g.constant(Tensor::eye(2));
        let ia = g.matmul(i, a).unwrap();
        assert_eq!(g.value(ia), g.value(a));

        let z = g.constant(Tensor::zeros(&[3, 2]));
        let zb = g.matmul(z, a).unwrap();
        assert_eq!(g.value(zb), &Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn matmul_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[0.0, 0.0], &[3f64.ln(), 0.0]]));
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[0.5, 0.5]);
        assert!((v.at(1, 0) - 0.75).abs() < 1e-15);
        assert!((v.at(1, 1) - 0.25).abs() < 1e-15);

        let shifted = g.constant(mat(&[&[0.0 + 7.5, 0.0 + 7.5], &[3f64.ln() + 7.5, 7.5]]));
        let ys = g.softmax_rows(shifted).unwrap();
        assert!(g.value(ys).max_abs_diff(g.value(y)) < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gamma = g.constant(Tensor::vector(vec![1.0; 3]));
        let beta = g.constant(Tensor::vector(vec![0.0; 3]));
        let x = g.constant(mat(&[&[1.0, 1.0, 1.0]]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let g2 = g.constant(Tensor::vector(vec![1.0; 2]));
        let b2 = g.constant(Tensor::vector(vec![0.0; 2]));
        let x2 = g.constant(mat(&[&[1.0, 3.0]]));
        let y2 = g.layer_norm(x2, g2, b2, 0.0).unwrap();
        assert_eq!(g.value(y2).data(), &[-1.0, 1.0]);

        let zero_gain = g.constant(Tensor::vector(vec![0.0; 3]));
        let shift = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let x3 = g.constant(mat(&[&[4.0, -2.0, 9.0], &[0.1, 0.2, 0.3]]));
        let y3 = g.layer_norm(x3, zero_gain, shift, 1e-5).unwrap();
        assert_eq!(g.value(y3).row(0), &[0.5, -1.0, 2.0]);
        assert_eq!(g.value(y3).row(1), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn activation_examples() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert!((Activation::Gelu.apply(1.0) - 0.841_345).abs() < 1e-6);
    }

    #[test]
    fn depthwise_conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[1.0], &[2.0], &[3.0]]));
        let ones = g.constant(mat(&[&[1.0], &[1.0], &[1.0]]));
        let y = g.depthwise_conv1d(x, ones).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);

        let delta = g.constant(mat(&[&[0.0], &[1.0], &[0.0]]));
        let y = g.depthwise_conv1d(x, delta).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let zero = g.constant(Tensor::zeros(&[5, 1]));
        let y = g.depthwise_conv1d(x, zero).unwrap();
        assert_eq!(g.value(y), &Tensor::zeros(&[3, 1]));

        let even = g.constant(Tensor::zeros(&[2, 1]));
        assert!(g.depthwise_conv1d(x, even).is_err());
    }

    #[test]
    fn mean_std_examples() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[1.0], &[3.0]]));
        let m = g.mean_rows(x).unwrap();
        let s = g.std_rows(x, 0.0).unwrap();
        assert_eq!(g.value(m).data(), &[2.0]);
        assert_eq!(g.value(s).data(), &[1.0]);

        let c = g.constant(Tensor::full(&[4, 2], 2.5));
        let m = g.mean_rows(c).unwrap();
        let s = g.std_rows(c, 0.0).unwrap();
        assert_eq!(g.value(m).data(), &[2.5, 2.5]);
        assert_eq!(g.value(s).data(), &[0.0, 0.0]);

        let one = g.constant(mat(&[&[4.0, -1.0]]));
        let m = g.mean_rows(one).unwrap();
        let s = g.std_rows(one, 0.0).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, -1.0]);
        assert_eq!(g.value(s).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_square_and_disconnected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let unused = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
        assert_eq!(g.grad_or_zeros(unused).data(), &[0.0, 0.0]);

        // accumulation across calls, then reset
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.cross_entropy(z, &[3]).is_err());
    }
}
