//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes together with the
//! values the backward pass needs. [`Graph::backward`] then walks the record
//! in strict reverse order and returns gradients for any set of watched
//! nodes, which may be parameters or intermediate activations alike.
//!
//! ```
//! use sgdrop_core::autodiff::Graph;
//! use sgdrop_core::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap().with_requires_grad(true));
//! let sq = g.mul(x, x).unwrap();
//! let y = g.sum(sq);
//! let grads = g.backward(y, &[x]).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use kernels::{ConvGeom, PoolGeom};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool2d {
        x: Var,
        arg: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SelectSum {
        x: Var,
        columns: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SelectSum { .. } => "select_sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients of a scalar output with respect to watched nodes.
#[derive(Debug, Clone)]
pub struct GradResult<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> GradResult<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// A recording of tensor operations.
#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn two_d(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, format!("expected a matrix, got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Whether gradients can flow into `v`.
    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(tracked),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records a leaf. It is tracked when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let tracked = t.requires_grad();
        self.push(t, Op::Leaf, tracked)
    }

    /// Records an untracked leaf regardless of the tensor's flag.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A constant copy of `v`; gradients never flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.detach();
        self.constant(t)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), op, f)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, make(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let tracked = self.any_tracked(&[a]);
        self.push(value, Op::Scale(a, s), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let tracked = self.any_tracked(&[a]);
        self.push(value, Op::Relu(a), tracked)
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = two_d(self.value(a).shape(), "matmul")?;
        let (k2, n) = two_d(self.value(b).shape(), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), tracked))
    }

    /// Fully-connected layer `x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = two_d(self.value(x).shape(), "linear")?;
        let (fout, win) = two_d(self.value(w).shape(), "linear")?;
        if fin != win {
            return Err(Error::shape(
                "linear",
                format!("input [{n}, {fin}] vs weight [{fout}, {win}]"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [fout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs {fout} outputs", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(fout) {
                row.copy_from_slice(bias);
            }
        }
        kernels::matmul_a_bt_acc(self.value(x).data(), self.value(w).data(), &mut out, n, fin, fout);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let tracked = self.any_tracked(&inputs);
        Ok(self.push(Tensor::new(&[n, fout], out)?, Op::Linear { x, w, b }, tracked))
    }

    /// 2-D convolution over NCHW input with `w: [O, C, K, K]` and `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, padding)?;
        if let Some(b) = b {
            if self.value(b).shape() != [geom.out_channels] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} vs {} output channels", self.value(b).shape(), geom.out_channels),
                ));
            }
        }
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let tracked = self.any_tracked(&inputs);
        let cols = if tracked { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::new(&geom.out_shape(), out)?,
            Op::Conv2d { x, w, b, geom, cols },
            tracked,
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.value(x).shape(), kernel, stride)?;
        let (out, arg) = kernels::maxpool2d_forward(self.value(x).data(), &geom);
        let tracked = self.any_tracked(&[x]);
        let arg = if tracked { arg } else { Vec::new() };
        Ok(self.push(Tensor::new(&geom.out_shape(), out)?, Op::MaxPool2d { x, arg }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.any_tracked(&[x]);
        self.push(value, Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::of(t.numel() as f64));
        let tracked = self.any_tracked(&[x]);
        self.push(value, Op::Mean(x), tracked)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = two_d(self.value(x).shape(), "softmax")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::Softmax(x), tracked))
    }

    /// Row-wise log-softmax of a matrix, stabilised by max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = two_d(self.value(x).shape(), "log_softmax")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln() + m;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::LogSoftmax(x), tracked))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = two_d(self.value(logits).shape(), "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows of logits vs {} labels", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_exact_mut(c).zip(labels) {
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln();
            loss += lse - (row[label] - m);
            for v in row.iter_mut() {
                *v = (*v - m - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / T::of(n as f64));
        let tracked = self.any_tracked(&[logits]);
        let probs = if tracked { probs } else { Vec::new() };
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// `Σ_i x[i, columns[i]]` over the rows of a matrix.
    pub fn select_sum(&mut self, x: Var, columns: &[usize]) -> Result<Var> {
        let (n, c) = two_d(self.value(x).shape(), "select_sum")?;
        if columns.len() != n {
            return Err(Error::shape(
                "select_sum",
                format!("{n} rows vs {} column indices", columns.len()),
            ));
        }
        if let Some(&label) = columns.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let data = self.value(x).data();
        let total = columns
            .iter()
            .enumerate()
            .fold(T::zero(), |a, (i, &col)| a + data[i * c + col]);
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SelectSum {
                x,
                columns: columns.to_vec(),
            },
            tracked,
        ))
    }

    /// Reverse-mode gradients of the one-element `output` with respect to
    /// each watched node. Watched nodes with no path to the output get zeros.
    pub fn backward(&self, output: Var, watched: &[Var]) -> Result<GradResult<T>> {
        let n = self.nodes.len();
        for &w in watched.iter().chain(std::iter::once(&output)) {
            if w.0 >= n {
                return Err(Error::UnknownNode(w.0));
            }
        }
        if let Some(w) = watched.iter().find(|w| !self.nodes[w.0].tracked) {
            return Err(Error::NotTracked(w.0));
        }
        let out_shape = self.nodes[output.0].value.shape();
        if self.nodes[output.0].value.numel() != 1 {
            return Err(Error::NonScalarOutput(out_shape.to_vec()));
        }

        let mut keep = vec![false; n];
        for w in watched {
            keep[w.0] = true;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[output.0].tracked {
            grads[output.0] = Some(vec![T::one()]);
        }

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            if keep[i] {
                grads[i] = Some(g);
            }
        }

        let mut result = HashMap::with_capacity(watched.len());
        for &w in watched {
            let shape = self.nodes[w.0].value.shape();
            let t = match grads[w.0].take() {
                Some(g) => Tensor::new(shape, g)?,
                None => match result.get(&w) {
                    Some(_) => continue,
                    None => Tensor::zeros(shape),
                },
            };
            result.insert(w, t);
        }
        Ok(GradResult { grads: result })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let tracked = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let c = g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, c);
                }
                if tracked(*b) {
                    let c = g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, c);
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|&v| v * *s).collect());
            }
            Op::Relu(a) => {
                let c = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, c);
            }
            Op::MatMul(a, b) => {
                let (m, k) = two_d(self.nodes[a.0].value.shape(), "matmul")?;
                let n = node.value.shape()[1];
                if tracked(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_a_bt_acc(g, val(*b), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if tracked(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_at_b_acc(val(*a), g, &mut db, k, m, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = two_d(self.nodes[x.0].value.shape(), "linear")?;
                let fout = node.value.shape()[1];
                if tracked(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    kernels::matmul_acc(g, val(*w), &mut dx, n, fout, fin);
                    self.accumulate(grads, *x, dx);
                }
                if tracked(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    kernels::matmul_at_b_acc(g, val(*x), &mut dw, fout, n, fin);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if tracked(*b) {
                        let mut db = vec![T::zero(); fout];
                        for row in g.chunks_exact(fout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (dx, dw, db) = kernels::conv2d_backward(g, val(*w), cols, geom, tracked(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool2d { x, arg } => {
                let dx = kernels::maxpool2d_backward(g, arg, self.nodes[x.0].value.numel());
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Softmax(x) => {
                let c = node.value.shape()[1];
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks_exact(c).zip(node.value.data().chunks_exact(c)) {
                    let s = kernels::dot(gr, yr);
                    dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - s)));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let c = node.value.shape()[1];
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks_exact(c).zip(node.value.data().chunks_exact(c)) {
                    let s = gr.iter().fold(T::zero(), |a, &v| a + v);
                    dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| gv - yv.exp() * s));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.nodes[logits.0].value.shape()[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * c + l] -= scale;
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::SelectSum { x, columns } => {
                let c = self.nodes[x.0].value.shape()[1];
                let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for (i, &col) in columns.iter().enumerate() {
                    dx[i * c + col] = g[0];
                }
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
