//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Define-by-run: every forward call records nodes on a [`Graph`] (a tape);
//! [`Graph::backward`] replays it in reverse creation order, which is always
//! a valid reverse-topological order. Graphs are rebuilt for every forward
//! pass and confined to one thread; plain [`Tensor`] values are freely
//! shareable.
//!
//! Broadcast rule for elementwise binaries: shapes are right-aligned and the
//! shorter one is padded with leading 1s; each aligned dimension pair must be
//! equal or contain a 1, which is replicated. Gradients sum over replicated
//! dimensions.

mod gradcheck;
mod rng;
pub mod special;
mod tensor;

pub use gradcheck::{grad_check, DEFAULT_EPS};
pub use rng::{Rng, RNG_ALGORITHM};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Abs,
    Neg,
    LnGamma,
    Digamma,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, lhs: Var, rhs: Var },
    Matmul { lhs: Var, rhs: Var },
    Softmax { x: Var, axis: usize },
    Reduce { kind: ReduceKind, x: Var, axis: Option<usize>, argmax: Vec<usize> },
    Unary { kind: UnaryKind, x: Var },
    Scale { x: Var, k: f64 },
    AddScalar { x: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Narrow { x: Var, axis: usize, start: usize, len: usize },
    BroadcastTo { x: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

// Right-aligned broadcast of `shape` to `target`: true if compatible.
fn broadcastable_to(shape: &[usize], target: &[usize]) -> bool {
    if shape.len() > target.len() {
        return false;
    }
    let offset = target.len() - shape.len();
    shape
        .iter()
        .enumerate()
        .all(|(i, &d)| d == target[offset + i] || d == 1)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn pad_left(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    padded
}

// Row-major strides with stride 0 on broadcast (size-1) dims.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let padded = pad_left(shape, out_shape.len());
    let mut strides = vec![0usize; out_shape.len()];
    let mut acc = 1usize;
    for d in (0..padded.len()).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

// Apply `f(out_idx, a_idx, b_idx)` over every output element of a broadcast
// elementwise op.
fn for_each_broadcast(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let ndim = out_shape.len();
    let mut coords = vec![0usize; ndim];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for flat in 0..numel {
        f(flat, ia, ib);
        // odometer increment
        for d in (0..ndim).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

// (outer, axis_len, inner) decomposition for iteration along one axis.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node { value, grad, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: gradients never flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable input: receives a gradient after [`Self::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Gradient buffer of `v` as a tensor of the same shape.
    pub fn grad(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), self.nodes[v.0].grad.clone())
            .expect("grad buffer matches value shape")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── elementwise binaries ─────────────────────────────────────────

    fn binary(&mut self, kind: BinaryKind, lhs: Var, rhs: Var) -> Result<Var> {
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let a_shape = self.shape(lhs).to_vec();
        let b_shape = self.shape(rhs).to_vec();
        let out_shape = broadcast_shape(op_name, &a_shape, &b_shape)?;
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        {
            let a = self.nodes[lhs.0].value.data();
            let b = self.nodes[rhs.0].value.data();
            if a_shape == b_shape {
                match kind {
                    BinaryKind::Add => {
                        for i in 0..numel {
                            data[i] = a[i] + b[i];
                        }
                    }
                    BinaryKind::Sub => {
                        for i in 0..numel {
                            data[i] = a[i] - b[i];
                        }
                    }
                    BinaryKind::Mul => {
                        for i in 0..numel {
                            data[i] = a[i] * b[i];
                        }
                    }
                    BinaryKind::Div => {
                        for i in 0..numel {
                            data[i] = a[i] / b[i];
                        }
                    }
                }
            } else {
                for_each_broadcast(&a_shape, &b_shape, &out_shape, |o, ia, ib| {
                    data[o] = match kind {
                        BinaryKind::Add => a[ia] + b[ib],
                        BinaryKind::Sub => a[ia] - b[ib],
                        BinaryKind::Mul => a[ia] * b[ib],
                        BinaryKind::Div => a[ia] / b[ib],
                    };
                });
            }
        }
        let value = Tensor::new(out_shape, data).expect("broadcast shape consistent");
        let rg = self.any_requires(&[lhs, rhs]);
        Ok(self.push(value, rg, Op::Binary { kind, lhs, rhs }))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, lhs, rhs)
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, lhs, rhs)
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, lhs, rhs)
    }

    pub fn div(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, lhs, rhs)
    }

    // ── matmul ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let a_shape = self.shape(lhs).to_vec();
        let b_shape = self.shape(rhs).to_vec();
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: a_shape, rhs: b_shape });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let mut data = vec![0.0; m * n];
        {
            let a = self.nodes[lhs.0].value.data();
            let b = self.nodes[rhs.0].value.data();
            for i in 0..m {
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    let crow = &mut data[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += aip * brow[j];
                    }
                }
            }
        }
        let value = Tensor::new(vec![m, n], data).expect("matmul shape");
        let rg = self.any_requires(&[lhs, rhs]);
        Ok(self.push(value, rg, Op::Matmul { lhs, rhs }))
    }

    // ── softmax ──────────────────────────────────────────────────────

    /// Softmax along `axis`; subtracts the per-slice max before
    /// exponentiation so inputs of any magnitude stay finite.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfBounds { axis, shape });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[idx(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[idx(j)] /= sum;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let value = Tensor::new(shape, data).expect("softmax shape");
        Ok(self.push(value, rg, Op::Softmax { x, axis }))
    }

    // ── reductions ───────────────────────────────────────────────────

    fn reduce(&mut self, kind: ReduceKind, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let src_len = self.nodes[x.0].value.numel();
        if let Some(a) = axis {
            if a >= shape.len() {
                return Err(Error::AxisOutOfBounds { axis: a, shape });
            }
            if shape[a] == 0 {
                return Err(Error::InvalidArgument(format!(
                    "cannot reduce empty axis {a} of shape {shape:?}"
                )));
            }
        } else if src_len == 0 {
            return Err(Error::InvalidArgument("cannot reduce an empty tensor".into()));
        }
        let src = self.nodes[x.0].value.data();
        let (out_shape, data, argmax) = match axis {
            None => {
                let mut argmax = Vec::new();
                let v = match kind {
                    ReduceKind::Sum => src.iter().sum(),
                    ReduceKind::Mean => src.iter().sum::<f64>() / src_len as f64,
                    ReduceKind::Max => {
                        let mut best = 0usize;
                        for (i, &v) in src.iter().enumerate() {
                            if v > src[best] {
                                best = i;
                            }
                        }
                        argmax.push(best);
                        src[best]
                    }
                };
                (vec![1], vec![v], argmax)
            }
            Some(a) => {
                let (outer, len, inner) = axis_split(&shape, a);
                let out_shape = reduced_shape(&shape, a);
                let mut data = vec![0.0; outer * inner];
                let mut argmax = Vec::new();
                if kind == ReduceKind::Max {
                    argmax.resize(outer * inner, 0);
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let out = o * inner + i;
                        match kind {
                            ReduceKind::Sum => {
                                data[out] = (0..len).map(|j| src[idx(j)]).sum();
                            }
                            ReduceKind::Mean => {
                                data[out] =
                                    (0..len).map(|j| src[idx(j)]).sum::<f64>() / len as f64;
                            }
                            ReduceKind::Max => {
                                // first argmax in row-major order wins ties
                                let mut best = idx(0);
                                for j in 1..len {
                                    if src[idx(j)] > src[best] {
                                        best = idx(j);
                                    }
                                }
                                data[out] = src[best];
                                argmax[out] = best;
                            }
                        }
                    }
                }
                (out_shape, data, argmax)
            }
        };
        let rg = self.nodes[x.0].requires_grad;
        let value = Tensor::new(out_shape, data).expect("reduce shape");
        Ok(self.push(value, rg, Op::Reduce { kind, x, axis, argmax }))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axis)
    }

    /// Max reduction. The gradient routes to the first argmax (row-major)
    /// of each slice; ties never split the gradient.
    pub fn max(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Max, x, axis)
    }

    // ── unaries ──────────────────────────────────────────────────────

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = match kind {
            UnaryKind::Relu => self.nodes[x.0].value.map(|v| v.max(0.0)),
            UnaryKind::Tanh => self.nodes[x.0].value.map(f64::tanh),
            UnaryKind::Sigmoid => self.nodes[x.0].value.map(|v| 1.0 / (1.0 + (-v).exp())),
            // softplus(x) = max(x,0) + ln(1 + e^{−|x|}): exact and overflow-free
            UnaryKind::Softplus => {
                self.nodes[x.0].value.map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            }
            UnaryKind::Exp => self.nodes[x.0].value.map(f64::exp),
            UnaryKind::Ln => self.nodes[x.0].value.map(f64::ln),
            UnaryKind::Abs => self.nodes[x.0].value.map(f64::abs),
            UnaryKind::Neg => self.nodes[x.0].value.map(|v| -v),
            UnaryKind::LnGamma => self.nodes[x.0].value.map(special::ln_gamma),
            UnaryKind::Digamma => self.nodes[x.0].value.map(special::digamma),
        };
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, Op::Unary { kind, x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Ln, x)
    }

    /// |x|; the gradient at exactly 0 is 0 (subgradient choice).
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    /// Elementwise lnΓ(x); every entry must be strictly positive.
    pub fn ln_gamma(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument(
                "ln_gamma requires strictly positive entries".into(),
            ));
        }
        Ok(self.unary(UnaryKind::LnGamma, x))
    }

    /// Elementwise ψ(x); every entry must be strictly positive.
    pub fn digamma(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument(
                "digamma requires strictly positive entries".into(),
            ));
        }
        Ok(self.unary(UnaryKind::Digamma, x))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.nodes[x.0].value.map(|v| k * v);
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, Op::Scale { x, k })
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let value = self.nodes[x.0].value.map(|v| v + k);
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, Op::AddScalar { x })
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::AxisOutOfBounds { axis, shape: first });
        }
        let mut axis_total = 0usize;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &x)| d != axis && x != first[d])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        let mut offset = 0usize;
        for &v in inputs {
            let len = self.shape(v)[axis];
            let src = self.nodes[v.0].value.data();
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        data[(o * axis_total + offset + j) * inner + i] =
                            src[(o * len + j) * inner + i];
                    }
                }
            }
            offset += len;
        }
        let rg = self.any_requires(inputs);
        let value = Tensor::new(out_shape, data).expect("concat shape");
        Ok(self.push(value, rg, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfBounds { axis, shape });
        }
        if start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow {start}..{} exceeds axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.nodes[x.0].value.data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[(o * len + j) * inner + i] = src[(o * alen + start + j) * inner + i];
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let value = Tensor::new(out_shape, data).expect("narrow shape");
        Ok(self.push(value, rg, Op::Narrow { x, axis, start, len }))
    }

    /// Replicate `x` up to `shape` under the right-aligned broadcast rule.
    pub fn broadcast_to(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let x_shape = self.shape(x).to_vec();
        if !broadcastable_to(&x_shape, &shape) {
            return Err(Error::ShapeMismatch { op: "broadcast_to", lhs: x_shape, rhs: shape });
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        {
            let src = self.nodes[x.0].value.data();
            for_each_broadcast(&x_shape, &shape, &shape, |o, ia, _| {
                data[o] = src[ia];
            });
        }
        let rg = self.nodes[x.0].requires_grad;
        let value = Tensor::new(shape, data).expect("broadcast shape");
        Ok(self.push(value, rg, Op::BroadcastTo { x }))
    }

    // ── convolution ──────────────────────────────────────────────────

    /// 2-D convolution: `x` is `[C, H, W]`, `w` is `[O, C, kh, kw]`, `b` is
    /// `[O]`; zero padding `pad` on all sides, square stride.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        if bs != vec![ws[0]] {
            return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: ws, rhs: bs });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut data = vec![0.0; c_out * oh * ow];
        {
            let xv = self.nodes[x.0].value.data();
            let wv = self.nodes[w.0].value.data();
            let bv = self.nodes[b.0].value.data();
            for o in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bv[o];
                        for c in 0..c_in {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += wv[((o * c_in + c) * kh + ky) * kw + kx]
                                        * xv[(c * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        data[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let rg = self.any_requires(&[x, w, b]);
        let value = Tensor::new(vec![c_out, oh, ow], data).expect("conv2d shape");
        Ok(self.push(value, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Zero every gradient buffer. Without this, repeated backward calls
    /// accumulate into the same buffers.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Reverse pass from a scalar root. Gradients accumulate (+=) into every
    /// reachable node that requires grad; unreachable nodes keep zeros.
    /// Each call propagates through fresh buffers and adds the result onto
    /// whatever was there, so two backward calls double every gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        let saved: Vec<Vec<f64>> = self
            .nodes
            .iter_mut()
            .map(|n| std::mem::replace(&mut n.grad, vec![0.0; n.value.numel()]))
            .collect();
        self.nodes[root.0].grad[0] = 1.0;
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            if self.nodes[id].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            self.backprop_node(id);
        }
        for (node, old) in self.nodes.iter_mut().zip(saved) {
            for (g, o) in node.grad.iter_mut().zip(old) {
                *g += o;
            }
        }
        Ok(())
    }

    // Take the node's grad out, push into inputs, put it back. The borrow
    // dance keeps this safe without cloning values.
    fn backprop_node(&mut self, id: usize) {
        let grad = std::mem::take(&mut self.nodes[id].grad);
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Binary { kind, lhs, rhs } => {
                let (kind, lhs, rhs) = (*kind, *lhs, *rhs);
                self.backprop_binary(id, kind, lhs, rhs, &grad);
            }
            Op::Matmul { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                let (m, k) = {
                    let s = self.shape(lhs);
                    (s[0], s[1])
                };
                let n = self.shape(rhs)[1];
                if self.nodes[lhs.0].requires_grad {
                    // dA = dC · Bᵀ
                    let b = self.nodes[rhs.0].value.data().to_vec();
                    let da = &mut self.nodes[lhs.0].grad;
                    for i in 0..m {
                        for j in 0..n {
                            let g = grad[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += g * b[p * n + j];
                            }
                        }
                    }
                }
                if self.nodes[rhs.0].requires_grad {
                    // dB = Aᵀ · dC
                    let a = self.nodes[lhs.0].value.data().to_vec();
                    let db = &mut self.nodes[rhs.0].grad;
                    for i in 0..m {
                        for p in 0..k {
                            let aip = a[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * grad[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                if self.nodes[x.0].requires_grad {
                    let shape = self.nodes[id].value.shape().to_vec();
                    let (outer, len, inner) = axis_split(&shape, axis);
                    let y = self.nodes[id].value.data().to_vec();
                    let dx = &mut self.nodes[x.0].grad;
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| grad[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                dx[idx(j)] += y[idx(j)] * (grad[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Reduce { kind, x, axis, argmax } => {
                let (kind, x, axis) = (*kind, *x, *axis);
                let argmax = argmax.clone();
                if self.nodes[x.0].requires_grad {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    match (kind, axis) {
                        (ReduceKind::Sum, None) => {
                            let g = grad[0];
                            self.nodes[x.0].grad.iter_mut().for_each(|d| *d += g);
                        }
                        (ReduceKind::Mean, None) => {
                            let g = grad[0] / self.nodes[x.0].value.numel() as f64;
                            self.nodes[x.0].grad.iter_mut().for_each(|d| *d += g);
                        }
                        (ReduceKind::Max, None) => {
                            self.nodes[x.0].grad[argmax[0]] += grad[0];
                        }
                        (ReduceKind::Sum, Some(a)) | (ReduceKind::Mean, Some(a)) => {
                            let (outer, len, inner) = axis_split(&in_shape, a);
                            let denom =
                                if kind == ReduceKind::Mean { len as f64 } else { 1.0 };
                            let dx = &mut self.nodes[x.0].grad;
                            for o in 0..outer {
                                for j in 0..len {
                                    for i in 0..inner {
                                        dx[(o * len + j) * inner + i] +=
                                            grad[o * inner + i] / denom;
                                    }
                                }
                            }
                        }
                        (ReduceKind::Max, Some(_)) => {
                            let dx = &mut self.nodes[x.0].grad;
                            for (out, &src_idx) in argmax.iter().enumerate() {
                                dx[src_idx] += grad[out];
                            }
                        }
                    }
                }
            }
            Op::Unary { kind, x } => {
                let (kind, x) = (*kind, *x);
                if self.nodes[x.0].requires_grad {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let yv = self.nodes[id].value.data().to_vec();
                    let dx = &mut self.nodes[x.0].grad;
                    match kind {
                        UnaryKind::Relu => {
                            for i in 0..xv.len() {
                                if xv[i] > 0.0 {
                                    dx[i] += grad[i];
                                }
                            }
                        }
                        UnaryKind::Tanh => {
                            for i in 0..xv.len() {
                                dx[i] += grad[i] * (1.0 - yv[i] * yv[i]);
                            }
                        }
                        UnaryKind::Sigmoid => {
                            for i in 0..xv.len() {
                                dx[i] += grad[i] * yv[i] * (1.0 - yv[i]);
                            }
                        }
                        UnaryKind::Softplus => {
                            for i in 0..xv.len() {
                                dx[i] += grad[i] / (1.0 + (-xv[i]).exp());
                            }
                        }
                        UnaryKind::Exp => {
                            for i in 0..xv.len() {
                                dx[i] += grad[i] * yv[i];
                            }
                        }
                        UnaryKind::Ln => {
                            for i in 0..xv.len() {
                                dx[i] += grad[i] / xv[i];
                            }
                        }
                        UnaryKind::Abs => {
                            for i in 0..xv.len() {
                                dx[i] += grad[i] * xv[i].signum() * f64::from(xv[i] != 0.0);
                            }
                        }
                        UnaryKind::Neg => {
                            for i in 0..xv.len() {
                                dx[i] -= grad[i];
                            }
                        }
                        UnaryKind::LnGamma => {
                            for i in 0..xv.len() {
                                dx[i] += grad[i] * special::digamma(xv[i]);
                            }
                        }
                        UnaryKind::Digamma => {
                            for i in 0..xv.len() {
                                dx[i] += grad[i] * special::trigamma(xv[i]);
                            }
                        }
                    }
                }
            }
            Op::Scale { x, k } => {
                let (x, k) = (*x, *k);
                if self.nodes[x.0].requires_grad {
                    let dx = &mut self.nodes[x.0].grad;
                    for i in 0..grad.len() {
                        dx[i] += k * grad[i];
                    }
                }
            }
            Op::AddScalar { x } => {
                let x = *x;
                if self.nodes[x.0].requires_grad {
                    let dx = &mut self.nodes[x.0].grad;
                    for i in 0..grad.len() {
                        dx[i] += grad[i];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                let out_shape = self.nodes[id].value.shape().to_vec();
                let (outer, total, inner) = axis_split(&out_shape, axis);
                let mut offset = 0usize;
                for v in inputs {
                    let len = self.shape(v)[axis];
                    if self.nodes[v.0].requires_grad {
                        let dx = &mut self.nodes[v.0].grad;
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    dx[(o * len + j) * inner + i] +=
                                        grad[(o * total + offset + j) * inner + i];
                                }
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if self.nodes[x.0].requires_grad {
                    let dx = &mut self.nodes[x.0].grad;
                    for i in 0..grad.len() {
                        dx[i] += grad[i];
                    }
                }
            }
            Op::Narrow { x, axis, start, len } => {
                let (x, axis, start, len) = (*x, *axis, *start, *len);
                if self.nodes[x.0].requires_grad {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    let (outer, alen, inner) = axis_split(&in_shape, axis);
                    let dx = &mut self.nodes[x.0].grad;
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                dx[(o * alen + start + j) * inner + i] +=
                                    grad[(o * len + j) * inner + i];
                            }
                        }
                    }
                }
            }
            Op::BroadcastTo { x } => {
                let x = *x;
                if self.nodes[x.0].requires_grad {
                    let x_shape = self.nodes[x.0].value.shape().to_vec();
                    let out_shape = self.nodes[id].value.shape().to_vec();
                    let dx = &mut self.nodes[x.0].grad;
                    for_each_broadcast(&x_shape, &out_shape, &out_shape, |o, ia, _| {
                        dx[ia] += grad[o];
                    });
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let os = self.nodes[id].value.shape().to_vec();
                let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
                let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
                let (oh, ow) = (os[1], os[2]);
                if self.nodes[b.0].requires_grad {
                    let db = &mut self.nodes[b.0].grad;
                    for o in 0..c_out {
                        db[o] += grad[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
                    }
                }
                if self.nodes[w.0].requires_grad {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let dw = &mut self.nodes[w.0].grad;
                    for o in 0..c_out {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = grad[(o * oh + oy) * ow + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                for c in 0..c_in {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix =
                                                (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            dw[((o * c_in + c) * kh + ky) * kw + kx] += g
                                                * xv[(c * h + iy as usize) * wd
                                                    + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let wv = self.nodes[w.0].value.data().to_vec();
                    let dx = &mut self.nodes[x.0].grad;
                    for o in 0..c_out {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = grad[(o * oh + oy) * ow + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                for c in 0..c_in {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix =
                                                (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            dx[(c * h + iy as usize) * wd + ix as usize] += g
                                                * wv[((o * c_in + c) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.nodes[id].grad = grad;
    }

    fn backprop_binary(&mut self, id: usize, kind: BinaryKind, lhs: Var, rhs: Var, grad: &[f64]) {
        let out_shape = self.nodes[id].value.shape().to_vec();
        let a_shape = self.nodes[lhs.0].value.shape().to_vec();
        let b_shape = self.nodes[rhs.0].value.shape().to_vec();
        let same = a_shape == b_shape;
        let need_a = self.nodes[lhs.0].requires_grad;
        let need_b = self.nodes[rhs.0].requires_grad;
        match kind {
            BinaryKind::Add | BinaryKind::Sub => {
                let sign = if matches!(kind, BinaryKind::Sub) { -1.0 } else { 1.0 };
                if same {
                    if need_a {
                        let da = &mut self.nodes[lhs.0].grad;
                        for i in 0..grad.len() {
                            da[i] += grad[i];
                        }
                    }
                    if need_b {
                        let db = &mut self.nodes[rhs.0].grad;
                        for i in 0..grad.len() {
                            db[i] += sign * grad[i];
                        }
                    }
                } else {
                    if need_a {
                        let mut da = std::mem::take(&mut self.nodes[lhs.0].grad);
                        for_each_broadcast(&a_shape, &b_shape, &out_shape, |o, ia, _| {
                            da[ia] += grad[o];
                        });
                        self.nodes[lhs.0].grad = da;
                    }
                    if need_b {
                        let mut db = std::mem::take(&mut self.nodes[rhs.0].grad);
                        for_each_broadcast(&a_shape, &b_shape, &out_shape, |o, _, ib| {
                            db[ib] += sign * grad[o];
                        });
                        self.nodes[rhs.0].grad = db;
                    }
                }
            }
            BinaryKind::Mul => {
                let a = self.nodes[lhs.0].value.data().to_vec();
                let b = self.nodes[rhs.0].value.data().to_vec();
                if same {
                    if need_a {
                        let da = &mut self.nodes[lhs.0].grad;
                        for i in 0..grad.len() {
                            da[i] += grad[i] * b[i];
                        }
                    }
                    if need_b {
                        let db = &mut self.nodes[rhs.0].grad;
                        for i in 0..grad.len() {
                            db[i] += grad[i] * a[i];
                        }
                    }
                } else {
                    if need_a {
                        let mut da = std::mem::take(&mut self.nodes[lhs.0].grad);
                        for_each_broadcast(&a_shape, &b_shape, &out_shape, |o, ia, ib| {
                            da[ia] += grad[o] * b[ib];
                        });
                        self.nodes[lhs.0].grad = da;
                    }
                    if need_b {
                        let mut db = std::mem::take(&mut self.nodes[rhs.0].grad);
                        for_each_broadcast(&a_shape, &b_shape, &out_shape, |o, ia, ib| {
                            db[ib] += grad[o] * a[ia];
                        });
                        self.nodes[rhs.0].grad = db;
                    }
                }
            }
            BinaryKind::Div => {
                let a = self.nodes[lhs.0].value.data().to_vec();
                let b = self.nodes[rhs.0].value.data().to_vec();
                if same {
                    if need_a {
                        let da = &mut self.nodes[lhs.0].grad;
                        for i in 0..grad.len() {
                            da[i] += grad[i] / b[i];
                        }
                    }
                    if need_b {
                        let db = &mut self.nodes[rhs.0].grad;
                        for i in 0..grad.len() {
                            db[i] -= grad[i] * a[i] / (b[i] * b[i]);
                        }
                    }
                } else {
                    if need_a {
                        let mut da = std::mem::take(&mut self.nodes[lhs.0].grad);
                        for_each_broadcast(&a_shape, &b_shape, &out_shape, |o, ia, ib| {
                            da[ia] += grad[o] / b[ib];
                        });
                        self.nodes[lhs.0].grad = da;
                    }
                    if need_b {
                        let mut db = std::mem::take(&mut self.nodes[rhs.0].grad);
                        for_each_broadcast(&a_shape, &b_shape, &out_shape, |o, ia, ib| {
                            db[ib] -= grad[o] * a[ia] / (b[ib] * b[ib]);
                        });
                        self.nodes[rhs.0].grad = db;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
    }

    // Scalar objective sensitive to every output coordinate: sum(w ∘ y).
    fn weighted_sum(g: &mut Graph, y: Var, weights: &Tensor) -> Var {
        let w = g.leaf(weights.clone());
        let prod = g.mul(y, w).unwrap();
        g.sum(prod, None).unwrap()
    }

    #[test]
    fn elementwise_add_componentwise() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.leaf(Tensor::from_vec(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity_with_unit_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.5, -1.5, 2.0]));
        let ones = g.leaf(Tensor::full(vec![3], 1.0));
        let y = g.mul(x, ones).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let s = g.sum(y, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![4, 5]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn all_binary_ops_match_finite_differences() {
        let mut rng = Rng::new(2024);
        for seed in 0..20u64 {
            let mut local = rng.derive(seed);
            // keep b away from zero so div stays well-conditioned
            let b = random_tensor(&mut local, vec![3, 4], 0.5, 2.0);
            let w = random_tensor(&mut local, vec![3, 4], -1.0, 1.0);
            let x = random_tensor(&mut local, vec![3, 4], -2.0, 2.0);
            for op in 0..4 {
                let b = b.clone();
                let w = w.clone();
                let err = grad_check(
                    move |g, v| {
                        let bv = g.leaf(b.clone());
                        let y = match op {
                            0 => g.add(v, bv)?,
                            1 => g.sub(v, bv)?,
                            2 => g.mul(v, bv)?,
                            _ => g.div(v, bv)?,
                        };
                        Ok(weighted_sum(g, y, &w))
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "op {op} seed {seed}: {err}");
            }
        }
        let _ = rng.next_u64();
    }

    #[test]
    fn binary_ops_grad_wrt_second_operand() {
        let mut rng = Rng::new(77);
        let a = random_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
        let w = random_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
        let x = random_tensor(&mut rng, vec![3, 4], 0.5, 2.0);
        for op in 0..4 {
            let a = a.clone();
            let w = w.clone();
            let err = grad_check(
                move |g, v| {
                    let av = g.leaf(a.clone());
                    let y = match op {
                        0 => g.add(av, v)?,
                        1 => g.sub(av, v)?,
                        2 => g.mul(av, v)?,
                        _ => g.div(av, v)?,
                    };
                    Ok(weighted_sum(g, y, &w))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "op {op}: {err}");
        }
    }

    #[test]
    fn broadcast_add_and_grad_reduction() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
        let s = g.sum(y, None).unwrap();
        g.backward(s).unwrap();
        // each x entry appears in 3 outputs
        assert_eq!(g.grad(x).data(), &[3.0, 3.0]);
    }

    #[test]
    fn broadcast_grad_matches_fd() {
        let mut rng = Rng::new(55);
        let big = random_tensor(&mut rng, vec![4, 2, 3], 0.5, 1.5);
        let w = random_tensor(&mut rng, vec![4, 2, 3], -1.0, 1.0);
        let x = random_tensor(&mut rng, vec![2, 3], 0.5, 1.5);
        let err = grad_check(
            move |g, v| {
                let bv = g.leaf(big.clone());
                let y = g.mul(bv, v)?;
                Ok(weighted_sum(g, y, &w))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn matmul_hand_checked() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_grad_both_sides() {
        let mut rng = Rng::new(9);
        let b = random_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
        let w = random_tensor(&mut rng, vec![5, 4], -1.0, 1.0);
        let x = random_tensor(&mut rng, vec![5, 3], -1.0, 1.0);
        let b2 = b.clone();
        let w2 = w.clone();
        let err = grad_check(
            move |g, v| {
                let bv = g.leaf(b2.clone());
                let y = g.matmul(v, bv)?;
                Ok(weighted_sum(g, y, &w2))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "lhs grad: {err}");

        let a = random_tensor(&mut rng, vec![5, 3], -1.0, 1.0);
        let err = grad_check(
            move |g, v| {
                let av = g.leaf(a.clone());
                let y = g.matmul(av, v)?;
                Ok(weighted_sum(g, y, &w))
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rhs grad: {err}");

        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![4, 2]));
        assert!(g.matmul(a, b).is_err(), "inner-dim mismatch must be rejected");
    }

    #[test]
    fn softmax_constant_slice_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![5], 3.7));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_analytic_two_entry() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.0, 3.0_f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_extreme_inputs_stay_finite() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1000.0, -1000.0, 999.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let data = g.value(y).data();
        assert!(data.iter().all(|v| v.is_finite()));
        assert!((data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_slices_sum_to_one_and_grad_checks() {
        let rng = Rng::new(31);
        for seed in 0..20u64 {
            let mut local = rng.derive(seed);
            let x = random_tensor(&mut local, vec![3, 5], -4.0, 4.0);
            let w = random_tensor(&mut local, vec![3, 5], -1.0, 1.0);
            let mut g = Graph::new();
            let v = g.leaf(x.clone());
            let y = g.softmax(v, 1).unwrap();
            for row in 0..3 {
                let s: f64 = g.value(y).data()[row * 5..(row + 1) * 5].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            assert!(g.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
            let err = grad_check(
                move |g, v| {
                    let y = g.softmax(v, 1)?;
                    Ok(weighted_sum(g, y, &w))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn max_reduction_first_argmax_tie_rule() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 5.0, 5.0, 2.0]));
        let m = g.max(x, None).unwrap();
        assert_eq!(g.scalar_value(m), 5.0);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_axis_grad_is_one_hot_per_slice() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![1.0, 7.0, 7.0, 4.0, 2.0, 4.0]).unwrap());
        let m = g.max(x, Some(1)).unwrap();
        assert_eq!(g.value(m).data(), &[7.0, 4.0]);
        let s = g.sum(m, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_of_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![4, 7], -2.5));
        let m = g.mean(x, None).unwrap();
        assert_eq!(g.scalar_value(m), -2.5);
    }

    #[test]
    fn sum_axis_grad_checks() {
        let rng = Rng::new(13);
        for seed in 0..20u64 {
            let mut local = rng.derive(seed);
            let x = random_tensor(&mut local, vec![4, 6], -2.0, 2.0);
            let w = random_tensor(&mut local, vec![4], -1.0, 1.0);
            let err = grad_check(
                move |g, v| {
                    let y = g.sum(v, Some(1))?;
                    Ok(weighted_sum(g, y, &w))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn reduce_rejects_empty_axis() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![3, 0]));
        assert!(g.sum(x, Some(1)).is_err());
        assert!(g.max(x, None).is_err());
    }

    #[test]
    fn activation_point_values() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![-3.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0]);
        let s = g.sum(y, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.0]));
        let y = g.tanh(x);
        assert_eq!(g.value(y).data(), &[0.0]);
        let s = g.sum(y, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0]);
    }

    #[test]
    fn activations_ranges_and_grads() {
        let rng = Rng::new(99);
        for seed in 0..20u64 {
            let mut local = rng.derive(seed);
            let x = random_tensor(&mut local, vec![8], -3.0, 3.0);
            let w = random_tensor(&mut local, vec![8], -1.0, 1.0);
            {
                let mut g = Graph::new();
                let v = g.leaf(x.clone());
                let t = g.tanh(v);
                assert!(g.value(t).data().iter().all(|&v| v > -1.0 && v < 1.0));
                let s = g.sigmoid(v);
                assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
                let r = g.relu(v);
                assert!(g.value(r).data().iter().all(|&v| v >= 0.0));
            }
            for kind in 0..4 {
                let w = w.clone();
                let err = grad_check(
                    move |g, v| {
                        let y = match kind {
                            0 => g.relu(v),
                            1 => g.tanh(v),
                            2 => g.sigmoid(v),
                            _ => g.softplus(v),
                        };
                        Ok(weighted_sum(g, y, &w))
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "kind {kind} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn quadratic_backward_analytic() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq, None).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_root_backward_is_noop() {
        let mut g = Graph::new();
        let c = g.leaf(Tensor::scalar(42.0));
        g.backward(c).unwrap();
        assert_eq!(g.grad(c).data(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![3.0]));
        let y = g.scale(x, 2.0);
        let s = g.sum(y, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[4.0]);
        g.zero_grads();
        assert_eq!(g.grad(x).data(), &[0.0]);
    }

    #[test]
    fn off_path_tensor_grad_stays_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0]));
        let unused = g.param(Tensor::from_vec(vec![5.0]));
        let s = g.sum(x, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).data(), &[0.0]);
    }

    #[test]
    fn forward_backward_bit_determinism() {
        let run = || {
            let mut rng = Rng::new(12345);
            let x = random_tensor(&mut rng, vec![4, 4], -1.0, 1.0);
            let w = random_tensor(&mut rng, vec![4, 4], -1.0, 1.0);
            let mut g = Graph::new();
            let xv = g.param(x);
            let wv = g.param(w);
            let h = g.matmul(wv, xv).unwrap();
            let a = g.tanh(h);
            let sm = g.softmax(a, 1).unwrap();
            let loss = g.sum(sm, None).unwrap();
            g.backward(loss).unwrap();
            (
                g.value(loss).data().to_vec(),
                g.grad(xv).data().to_vec(),
                g.grad(wv).data().to_vec(),
            )
        };
        let (l1, gx1, gw1) = run();
        let (l2, gx2, gw2) = run();
        assert!(l1.iter().zip(&l2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gw1.iter().zip(&gw2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn concat_narrow_broadcast_reshape_grads() {
        let mut rng = Rng::new(41);
        let x = random_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
        let other = random_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
        let w6 = random_tensor(&mut rng, vec![4, 3], -1.0, 1.0);
        let o2 = other.clone();
        let err = grad_check(
            move |g, v| {
                let ov = g.leaf(o2.clone());
                let y = g.concat(&[v, ov], 0)?;
                Ok(weighted_sum(g, y, &w6))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "concat: {err}");

        let w2 = random_tensor(&mut rng, vec![1, 3], -1.0, 1.0);
        let err = grad_check(
            move |g, v| {
                let y = g.narrow(v, 0, 1, 1)?;
                Ok(weighted_sum(g, y, &w2))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "narrow: {err}");

        let w3 = random_tensor(&mut rng, vec![4, 2, 3], -1.0, 1.0);
        let err = grad_check(
            move |g, v| {
                let y = g.broadcast_to(v, vec![4, 2, 3])?;
                Ok(weighted_sum(g, y, &w3))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "broadcast_to: {err}");

        let w4 = random_tensor(&mut rng, vec![6], -1.0, 1.0);
        let err = grad_check(
            move |g, v| {
                let y = g.reshape(v, vec![6])?;
                Ok(weighted_sum(g, y, &w4))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "reshape: {err}");
    }

    #[test]
    fn concat_forward_layout() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3]);
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn conv2d_hand_checked_and_grads() {
        // 1 input channel 3x3, 1 output channel, 2x2 kernel, stride 1, no pad
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![1, 3, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])
                .unwrap(),
        );
        let w = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![0.5]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2]);
        // y[i,j] = x[i,j] + x[i+1,j+1] + 0.5
        assert_eq!(g.value(y).data(), &[6.5, 8.5, 12.5, 14.5]);

        let mut rng = Rng::new(8);
        let x = random_tensor(&mut rng, vec![2, 5, 5], -1.0, 1.0);
        let w = random_tensor(&mut rng, vec![3, 2, 3, 3], -0.5, 0.5);
        let bias = random_tensor(&mut rng, vec![3], -0.5, 0.5);
        let wsum = random_tensor(&mut rng, vec![3, 3, 3], -1.0, 1.0);

        let (wc, bc, ws) = (w.clone(), bias.clone(), wsum.clone());
        let err = grad_check(
            move |g, v| {
                let wv = g.leaf(wc.clone());
                let bv = g.leaf(bc.clone());
                let y = g.conv2d(v, wv, bv, 2, 1)?;
                Ok(weighted_sum(g, y, &ws))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "conv2d input grad: {err}");

        let (xc, bc, ws) = (x.clone(), bias.clone(), wsum.clone());
        let err = grad_check(
            move |g, v| {
                let xv = g.leaf(xc.clone());
                let bv = g.leaf(bc.clone());
                let y = g.conv2d(xv, v, bv, 2, 1)?;
                Ok(weighted_sum(g, y, &ws))
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "conv2d weight grad: {err}");

        let err = grad_check(
            move |g, v| {
                let xv = g.leaf(x.clone());
                let wv = g.leaf(w.clone());
                let y = g.conv2d(xv, wv, v, 2, 1)?;
                Ok(weighted_sum(g, y, &wsum))
            },
            &bias,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "conv2d bias grad: {err}");
    }

    #[test]
    fn lgamma_digamma_grads() {
        let rng = Rng::new(17);
        for seed in 0..20u64 {
            let mut local = rng.derive(seed);
            let x = random_tensor(&mut local, vec![5], 0.6, 8.0);
            let w = random_tensor(&mut local, vec![5], -1.0, 1.0);
            let w2 = w.clone();
            let err = grad_check(
                move |g, v| {
                    let y = g.ln_gamma(v)?;
                    Ok(weighted_sum(g, y, &w))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "lgamma seed {seed}: {err}");
            let err = grad_check(
                move |g, v| {
                    let y = g.digamma(v)?;
                    Ok(weighted_sum(g, y, &w2))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "digamma seed {seed}: {err}");
        }
        let mut g = Graph::new();
        let bad = g.leaf(Tensor::from_vec(vec![1.0, -0.5]));
        assert!(g.ln_gamma(bad).is_err());
    }

    #[test]
    fn abs_exp_ln_grads() {
        let mut rng = Rng::new(23);
        let x = random_tensor(&mut rng, vec![6], 0.2, 3.0);
        let w = random_tensor(&mut rng, vec![6], -1.0, 1.0);
        for kind in 0..3 {
            let w = w.clone();
            let err = grad_check(
                move |g, v| {
                    let y = match kind {
                        0 => g.abs(v),
                        1 => g.exp(v),
                        _ => g.ln(v),
                    };
                    Ok(weighted_sum(g, y, &w))
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "kind {kind}: {err}");
        }
    }
}
