//! Dense `f64` tensors and a define-by-run reverse-mode autodiff graph.
//!
//! Every forward operation appends a node to a [`Graph`]; [`Graph::backward`]
//! walks the nodes in reverse insertion order, which is a valid reverse
//! topological order because a node can only reference nodes created before
//! it. Gradients accumulate additively across fan-out.
//!
//! "Row" operations (`softmax_rows`, `logsumexp_rows`, ...) act on the trailing
//! axis; a tensor of shape `[a, b, K]` is treated as `a * b` rows of length `K`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("conv_same needs an odd kernel size, got {0}")]
    EvenKernel(usize),
    #[error("log of non-positive value {value} at index {index}")]
    LogDomain { index: usize, value: f64 },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function value is not finite near the evaluation point")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("holds {n} elements but {len} values were given"),
        });
    }
    Ok(())
}

/// Row-major dense tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        check_shape(&shape, values.len())?;
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// One-dimensional tensor. Panics on an empty vector.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor::new(vec![values.len()], values).expect("vector must be nonempty")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.values.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
    Exp,
    Log,
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    Dense { x: NodeId, w: NodeId, b: NodeId },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Conv { x: NodeId, k: NodeId, b: NodeId },
    Activation(Activation, NodeId),
    Map { x: NodeId, derivative: Vec<f64> },
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    ClampMin(NodeId, f64),
    SumRows(NodeId),
    SumAll(NodeId),
    SliceCols { x: NodeId, start: usize },
    BroadcastRows(NodeId),
    Stack(Vec<NodeId>),
    Rbf { sqdist: Vec<f64>, log_ls: NodeId },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation. Rebuilt for every forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let k = *shape.last().unwrap();
    (shape.iter().product::<usize>() / k, k)
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes hold valid shapes")
    }

    /// Registers a tensor; tracked for gradients when `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape.clone(), t.values.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<NodeId> {
        check_shape(&shape, values.len())?;
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).iter().map(|x| x + c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), value, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, c), rg)
    }

    /// Affine map `w·x + b`. `x` is `[n_in]` or a batch `[N, n_in]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let mismatch = |right: Vec<usize>| TensorError::ShapeMismatch {
            op: "dense",
            left: xs.clone(),
            right,
        };
        if ws.len() != 2 || xs.is_empty() || xs.len() > 2 {
            return Err(mismatch(ws));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        if *xs.last().unwrap() != n_in {
            return Err(mismatch(ws));
        }
        if bs != [n_out] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                left: ws,
                right: bs,
            });
        }
        let batch = if xs.len() == 2 { xs[0] } else { 1 };
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; batch * n_out];
        for n in 0..batch {
            let xr = &xv[n * n_in..(n + 1) * n_in];
            for i in 0..n_out {
                let wr = &wv[i * n_in..(i + 1) * n_in];
                out[n * n_out + i] = bv[i] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let shape = if xs.len() == 2 { vec![batch, n_out] } else { vec![n_out] };
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(shape, out, Op::Dense { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: "transpose needs a matrix".into(),
            });
        }
        let out = transpose_raw(self.value(a), s[0], s[1]);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![s[1], s[0]], out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        check_shape(&shape, self.value(a).len())?;
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::Reshape(a), rg))
    }

    /// Stride-1 cross-correlation with zero padding ("same" output size).
    ///
    /// 1D: `x [C_in, L]`, `k [C_out, C_in, k]`. 2D: `x [C_in, H, W]`,
    /// `k [C_out, C_in, k, k]`. `b [C_out]` in both cases.
    pub fn conv_same(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), self.shape(b))?;
        let out = geom.forward(self.value(x), self.value(k), self.value(b));
        let mut shape = vec![geom.c_out];
        shape.extend_from_slice(&self.shape(x)[1..]);
        let rg = self.rg(&[x, k, b]);
        Ok(self.push(shape, out, Op::Conv { x, k, b }, rg))
    }

    pub fn activation(&mut self, kind: Activation, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let value: Vec<f64> = match kind {
            Activation::Relu => xv.iter().map(|v| v.max(0.0)).collect(),
            Activation::Softplus => xv.iter().map(|&v| softplus(v)).collect(),
            Activation::Exp => xv.iter().map(|v| v.exp()).collect(),
            Activation::Log => {
                if let Some((index, &value)) = xv.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                    return Err(TensorError::LogDomain { index, value });
                }
                xv.iter().map(|v| v.ln()).collect()
            }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Activation(kind, x), rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.activation(Activation::Relu, x).expect("relu is total")
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.activation(Activation::Softplus, x).expect("softplus is total")
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(&mut self, x: NodeId, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> NodeId {
        let xv = self.value(x);
        let value = xv.iter().map(|&v| f(v)).collect();
        let derivative = xv.iter().map(|&v| df(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Map { x, derivative }, rg)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (rows, k) = rows_of(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            softmax_into(&xv[r * k..(r + 1) * k], &mut out[r * k..(r + 1) * k]);
        }
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (rows, k) = rows_of(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * k..(r + 1) * k];
            let lse = logsumexp(row);
            for (o, v) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::LogSoftmaxRows(x), rg)
    }

    pub fn logsumexp_rows(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        let (rows, k) = rows_of(&s);
        let xv = self.value(x);
        let out: Vec<f64> = (0..rows).map(|r| logsumexp(&xv[r * k..(r + 1) * k])).collect();
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::LogSumExpRows(x), rg)
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> NodeId {
        let value = self.value(x).iter().map(|v| v.max(floor)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::ClampMin(x, floor), rg)
    }

    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        let (rows, k) = rows_of(&s);
        let xv = self.value(x);
        let out: Vec<f64> = (0..rows).map(|r| xv[r * k..(r + 1) * k].iter().sum()).collect();
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::SumRows(x), rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![v], Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: format!("cannot slice columns {start}..{end}"),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![rows, end - start], out, Op::SliceCols { x, start }, rg))
    }

    /// `[N]` → `[N, cols]`, row `n` filled with `v[n]`.
    pub fn broadcast_rows(&mut self, v: NodeId, cols: usize) -> Result<NodeId> {
        let s = self.shape(v).to_vec();
        if s.len() != 1 || cols == 0 {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: "broadcast_rows needs a vector and positive width".into(),
            });
        }
        let out = self.value(v).iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect();
        let rg = self.rg(&[v]);
        Ok(self.push(vec![s[0], cols], out, Op::BroadcastRows(v), rg))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "stack of nothing".into(),
        })?;
        let mut out = Vec::new();
        for &p in parts {
            self.same_shape("stack", first, p)?;
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(self.shape(first));
        let rg = self.rg(parts);
        Ok(self.push(shape, out, Op::Stack(parts.to_vec()), rg))
    }

    /// Gaussian kernel weights `exp(-d / (2 ℓ²))` with `ℓ = exp(log_ls)`,
    /// where `sqdist` holds squared distances (constant w.r.t. the graph).
    pub fn rbf(&mut self, sqdist: Vec<f64>, shape: Vec<usize>, log_ls: NodeId) -> Result<NodeId> {
        check_shape(&shape, sqdist.len())?;
        if self.shape(log_ls) != [1] {
            return Err(TensorError::ShapeMismatch {
                op: "rbf",
                left: vec![1],
                right: self.shape(log_ls).to_vec(),
            });
        }
        let ls = self.scalar_value(log_ls).exp();
        let inv = 1.0 / (2.0 * ls * ls);
        let out = sqdist.iter().map(|d| (-d * inv).exp()).collect();
        let rg = self.rg(&[log_ls]);
        Ok(self.push(shape, out, Op::Rbf { sqdist, log_ls }, rg))
    }

    /// Populates gradients of `loss` with respect to every tracked node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss w.r.t. `id`, if `id` was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds this graph's gradient for `id` into `t.grad` (zeros if unreached).
    pub fn accumulate_into(&self, id: NodeId, t: &mut Tensor) {
        match self.grad(id) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.len()]),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, &mut |s| axpy(s, g, 1.0));
                send(*b, &mut |s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |s| axpy(s, g, 1.0));
                send(*b, &mut |s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                send(*a, &mut |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                send(*b, &mut |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                send(*a, &mut |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] / bv[i];
                    }
                });
                send(*b, &mut |s| {
                    for i in 0..g.len() {
                        s[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, &mut |s| axpy(s, g, 1.0)),
            Op::Scale(a, c) => send(*a, &mut |s| axpy(s, g, *c)),
            Op::Dense { x, w, b } => {
                let ws = &self.nodes[w.0].shape;
                let (n_out, n_in) = (ws[0], ws[1]);
                let batch = g.len() / n_out;
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                send(*x, &mut |s| {
                    for n in 0..batch {
                        for i in 0..n_out {
                            let gi = g[n * n_out + i];
                            if gi != 0.0 {
                                axpy(&mut s[n * n_in..(n + 1) * n_in], &wv[i * n_in..(i + 1) * n_in], gi);
                            }
                        }
                    }
                });
                send(*w, &mut |s| {
                    for n in 0..batch {
                        for i in 0..n_out {
                            let gi = g[n * n_out + i];
                            if gi != 0.0 {
                                axpy(&mut s[i * n_in..(i + 1) * n_in], &xv[n * n_in..(n + 1) * n_in], gi);
                            }
                        }
                    }
                });
                send(*b, &mut |s| {
                    for n in 0..batch {
                        axpy(s, &g[n * n_out..(n + 1) * n_out], 1.0);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                send(*a, &mut |s| {
                    // dA = G · Bᵀ
                    let bt = transpose_raw(bv, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    axpy(s, &da, 1.0);
                });
                send(*b, &mut |s| {
                    // dB = Aᵀ · G
                    let at = transpose_raw(av, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    axpy(s, &db, 1.0);
                });
            }
            Op::Transpose(a) => {
                let sa = &self.nodes[a.0].shape;
                let gt = transpose_raw(g, sa[1], sa[0]);
                send(*a, &mut |s| axpy(s, &gt, 1.0));
            }
            Op::Conv { x, k, b } => {
                let geom = ConvGeom::new(&self.nodes[x.0].shape, &self.nodes[k.0].shape, &self.nodes[b.0].shape)
                    .expect("validated in forward");
                let (xv, kv) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
                send(*x, &mut |s| geom.backward_input(g, kv, s));
                send(*k, &mut |s| geom.backward_kernel(g, xv, s));
                send(*b, &mut |s| geom.backward_bias(g, s));
            }
            Op::Activation(kind, x) => {
                let xv = &self.nodes[x.0].value;
                let yv = &node.value;
                send(*x, &mut |s| {
                    for i in 0..g.len() {
                        let d = match kind {
                            Activation::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Softplus => sigmoid(xv[i]),
                            Activation::Exp => yv[i],
                            Activation::Log => 1.0 / xv[i],
                        };
                        s[i] += g[i] * d;
                    }
                });
            }
            Op::Map { x, derivative } => send(*x, &mut |s| {
                for i in 0..g.len() {
                    s[i] += g[i] * derivative[i];
                }
            }),
            Op::SoftmaxRows(x) => {
                let (rows, k) = rows_of(&node.shape);
                let yv = &node.value;
                send(*x, &mut |s| {
                    for r in 0..rows {
                        let (y, gr) = (&yv[r * k..(r + 1) * k], &g[r * k..(r + 1) * k]);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            s[r * k + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let (rows, k) = rows_of(&node.shape);
                let yv = &node.value;
                send(*x, &mut |s| {
                    for r in 0..rows {
                        let gr = &g[r * k..(r + 1) * k];
                        let total: f64 = gr.iter().sum();
                        for j in 0..k {
                            s[r * k + j] += gr[j] - yv[r * k + j].exp() * total;
                        }
                    }
                });
            }
            Op::LogSumExpRows(x) => {
                let xv = &self.nodes[x.0].value;
                let (rows, k) = rows_of(&self.nodes[x.0].shape);
                let yv = &node.value;
                send(*x, &mut |s| {
                    for r in 0..rows {
                        for j in 0..k {
                            s[r * k + j] += g[r] * (xv[r * k + j] - yv[r]).exp();
                        }
                    }
                });
            }
            Op::ClampMin(x, floor) => {
                let xv = &self.nodes[x.0].value;
                send(*x, &mut |s| {
                    for i in 0..g.len() {
                        if xv[i] > *floor {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::SumRows(x) => {
                let (rows, k) = rows_of(&self.nodes[x.0].shape);
                send(*x, &mut |s| {
                    for r in 0..rows {
                        s[r * k..(r + 1) * k].iter_mut().for_each(|v| *v += g[r]);
                    }
                });
            }
            Op::SumAll(x) => send(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::SliceCols { x, start } => {
                let cols = self.nodes[x.0].shape[1];
                let width = node.shape[1];
                send(*x, &mut |s| {
                    for r in 0..node.shape[0] {
                        axpy(&mut s[r * cols + start..r * cols + start + width], &g[r * width..(r + 1) * width], 1.0);
                    }
                });
            }
            Op::BroadcastRows(v) => {
                let cols = node.shape[1];
                send(*v, &mut |s| {
                    for (r, sv) in s.iter_mut().enumerate() {
                        *sv += g[r * cols..(r + 1) * cols].iter().sum::<f64>();
                    }
                });
            }
            Op::Stack(parts) => {
                let n = g.len() / parts.len();
                for (i, p) in parts.iter().enumerate() {
                    send(*p, &mut |s| axpy(s, &g[i * n..(i + 1) * n], 1.0));
                }
            }
            Op::Rbf { sqdist, log_ls } => {
                let ls = self.nodes[log_ls.0].value[0].exp();
                let inv = 1.0 / (ls * ls);
                let total: f64 = (0..g.len()).map(|i| g[i] * node.value[i] * sqdist[i] * inv).sum();
                send(*log_ls, &mut |s| s[0] += total);
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(row, &b[p * n..(p + 1) * n], aip);
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Numerically stable `log Σ exp(x)`.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Max-shifted softmax of a plain slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    out
}

/// Spatial geometry of a same-padded convolution, 1D or 2D.
struct ConvGeom {
    c_in: usize,
    c_out: usize,
    k: usize,
    /// (H, W); 1D uses H = 1 with a 1 × k kernel.
    h: usize,
    w: usize,
    kh: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize], bs: &[usize]) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv_same",
            left: xs.to_vec(),
            right: ks.to_vec(),
        };
        let (h, w, kh) = match (xs.len(), ks.len()) {
            (2, 3) => (1, xs[1], 1),
            (3, 4) => {
                if ks[2] != ks[3] {
                    return Err(mismatch());
                }
                (xs[1], xs[2], ks[2])
            }
            _ => return Err(mismatch()),
        };
        let k = *ks.last().unwrap();
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel(k));
        }
        if ks[1] != xs[0] {
            return Err(mismatch());
        }
        if bs != [ks[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_same",
                left: ks.to_vec(),
                right: bs.to_vec(),
            });
        }
        Ok(ConvGeom {
            c_in: xs[0],
            c_out: ks[0],
            k,
            h,
            w,
            kh,
        })
    }

    /// Visits every (output row, input row, column shift, valid column range)
    /// for each kernel tap.
    fn taps(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let (ph, pw) = ((self.kh / 2) as isize, (self.k / 2) as isize);
        for ti in 0..self.kh {
            let di = ti as isize - ph;
            for tj in 0..self.k {
                let dj = tj as isize - pw;
                let tap = ti * self.k + tj;
                let j_lo = (-dj).max(0) as usize;
                let j_hi = (self.w as isize - dj).clamp(0, self.w as isize) as usize;
                if j_lo >= j_hi {
                    continue;
                }
                for i in 0..self.h {
                    let src = i as isize + di;
                    if src < 0 || src >= self.h as isize {
                        continue;
                    }
                    f(tap, i, src as usize, j_lo, j_hi, (j_lo as isize + dj) as usize);
                }
            }
        }
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn ktaps(&self) -> usize {
        self.kh * self.k
    }

    fn forward(&self, x: &[f64], kern: &[f64], bias: &[f64]) -> Vec<f64> {
        let (p, kt) = (self.plane(), self.ktaps());
        let mut out = vec![0.0; self.c_out * p];
        for co in 0..self.c_out {
            out[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = bias[co]);
        }
        self.taps(|tap, i, src, j_lo, j_hi, s_lo| {
            let n = j_hi - j_lo;
            for co in 0..self.c_out {
                let orow = co * p + i * self.w + j_lo;
                for ci in 0..self.c_in {
                    let wv = kern[(co * self.c_in + ci) * kt + tap];
                    if wv == 0.0 {
                        continue;
                    }
                    let xrow = ci * p + src * self.w + s_lo;
                    axpy(&mut out[orow..orow + n], &x[xrow..xrow + n], wv);
                }
            }
        });
        out
    }

    fn backward_input(&self, g: &[f64], kern: &[f64], dx: &mut [f64]) {
        let (p, kt) = (self.plane(), self.ktaps());
        self.taps(|tap, i, src, j_lo, j_hi, s_lo| {
            let n = j_hi - j_lo;
            for co in 0..self.c_out {
                let grow = co * p + i * self.w + j_lo;
                for ci in 0..self.c_in {
                    let wv = kern[(co * self.c_in + ci) * kt + tap];
                    let xrow = ci * p + src * self.w + s_lo;
                    axpy(&mut dx[xrow..xrow + n], &g[grow..grow + n], wv);
                }
            }
        });
    }

    fn backward_kernel(&self, g: &[f64], x: &[f64], dk: &mut [f64]) {
        let (p, kt) = (self.plane(), self.ktaps());
        self.taps(|tap, i, src, j_lo, j_hi, s_lo| {
            let n = j_hi - j_lo;
            for co in 0..self.c_out {
                let grow = co * p + i * self.w + j_lo;
                let gr = &g[grow..grow + n];
                for ci in 0..self.c_in {
                    let xrow = ci * p + src * self.w + s_lo;
                    let dot: f64 = gr.iter().zip(&x[xrow..xrow + n]).map(|(a, b)| a * b).sum();
                    dk[(co * self.c_in + ci) * kt + tap] += dot;
                }
            }
        });
    }

    fn backward_bias(&self, g: &[f64], db: &mut [f64]) {
        let p = self.plane();
        for (co, d) in db.iter_mut().enumerate() {
            *d += g[co * p..(co + 1) * p].iter().sum::<f64>();
        }
    }
}

/// Maximum of `|analytic − central difference| / max(1, |analytic|)` over
/// all coordinates of `x0`, for a scalar-valued graph function `f`.
pub fn grad_check<F>(f: F, x0: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.leaf(&x0.clone().with_grad());
    let y = f(&mut g, x)?;
    if !g.scalar_value(y).is_finite() {
        return Err(TensorError::NonFinite);
    }
    g.backward(y)?;
    let analytic = g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x0.len()]);

    let eval = |xs: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(xs);
        let y = f(&mut g, x)?;
        let v = g.scalar_value(y);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite)
        }
    };
    let mut worst: f64 = 0.0;
    let mut probe = x0.clone();
    probe.requires_grad = false;
    for i in 0..x0.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + h;
        let up = eval(&probe)?;
        probe.values[i] = orig - h;
        let down = eval(&probe)?;
        probe.values[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(1.0));
    }
    Ok(worst)
}
