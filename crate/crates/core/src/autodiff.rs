//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes only reference earlier nodes, so insertion order is a topological
//! order and [`Graph::backward`] visits each node exactly once, in reverse.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleRows(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var, usize),
    NormalizeSum(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mask(Var, Vec<T>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    GroupedMatmulT {
        x: Var,
        w: Var,
    },
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("add", va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-C vector to every row of an M×C matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.rank() != 2 || vb.numel() != vx.cols() {
            return Err(Error::dim("add_row", vx.shape(), vb.shape()));
        }
        let c = vx.cols();
        let mut out = vx.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = *o + vb.data()[i % c];
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("mul", va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let k = T::of(c);
        let out = self.value(x).map(|v| v * k);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let k = T::of(c);
        let out = self.value(x).map(|v| v + k);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// Multiplies row `i` of an M×C matrix by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vx.rank() != 2 || vs.numel() != vx.rows() {
            return Err(Error::dim("scale_rows", vx.shape(), vs.shape()));
        }
        let c = vx.cols();
        let mut out = vx.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = *o * vs.data()[i / c];
        }
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::ScaleRows(x, s), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| T::of(1.0 / (1.0 + (-v.f64()).exp())));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    /// Divides positive entries by their sum along `axis`.
    pub fn normalize_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(Error::Param(format!("axis {axis} out of range")));
        }
        let sums = vx.axis_sums(axis);
        if sums.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(Error::Numeric("normalize_sum over a non-positive sum".into()));
        }
        let (outer, len, inner) = vx.axis_split(axis);
        let mut out = vx.clone();
        let data = out.data_mut();
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let k = (o * len + l) * inner + i;
                    data[k] = T::of(data[k].f64() / sums[o * inner + i]);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::NormalizeSum(x, axis), rg))
    }

    /// Standardizes each last-axis row, then applies `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Param("layer_norm eps must be positive".into()));
        }
        let vx = self.value(x);
        let c = vx.cols();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.numel() != c || vb.numel() != c {
            return Err(Error::dim("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.numel() / c.max(1);
        let mut xhat = vec![0.0f64; vx.numel()];
        let mut inv_std = vec![0.0f64; rows];
        let mut out = Tensor::zeros(vx.shape());
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|v| (v.f64() - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j].f64() - mean) * inv;
                xhat[r * c + j] = h;
                out.data_mut()[r * c + j] =
                    T::of(vg.data()[j].f64() * h + vb.data()[j].f64());
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} must lie in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o = *o * *m;
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Mask(x, mask), rg))
    }

    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&tensors)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_columns(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, end)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, end)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Mean over rows: M×C → 1×C.
    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let means = vx.mean_rows()?;
        let out = Tensor::matrix(1, means.len(), means.into_iter().map(T::of).collect())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MeanRows(x), rg))
    }

    /// Column-wise maximum over rows: M×C → 1×C, with the winning row per
    /// column (lowest index on ties).
    pub fn reduce_max_with_argmax(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(Error::dim("reduce_max", vx.shape(), &[]));
        }
        let (m, c) = (vx.rows(), vx.cols());
        if m == 0 {
            return Err(Error::EmptyBag);
        }
        let mut arg = vec![0usize; c];
        let mut best: Vec<T> = vx.row(0).to_vec();
        for i in 1..m {
            for j in 0..c {
                let v = vx.at(i, j);
                if v > best[j] {
                    best[j] = v;
                    arg[j] = i;
                }
            }
        }
        let out = Tensor::matrix(1, c, best)?;
        let rg = self.any_grad(&[x]);
        Ok((self.push(out, Op::MaxRows(x, arg.clone()), rg), arg))
    }

    /// Sum of all entries, as a length-1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::vector(vec![T::of(s)]), Op::Sum(x), rg)
    }

    /// `logsumexp(logits) - logits[target]` for a single row of logits.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, target: usize) -> Result<Var> {
        let vl = self.value(logits);
        let c = vl.numel();
        if target >= c {
            return Err(Error::Param(format!("target class {target} out of range for {c} logits")));
        }
        let l: Vec<f64> = vl.to_f64_vec();
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        let probs: Vec<f64> = l.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - l[target];
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::vector(vec![T::of(loss)]),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Block-diagonal product. `x` is (G·S)×Q, `w` is G×R×Q; rows
    /// `[g·S, (g+1)·S)` are multiplied by `w[g]ᵀ`, giving (G·S)×R.
    pub fn grouped_matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 2 || vw.rank() != 3 {
            return Err(Error::dim("grouped_matmul", vx.shape(), vw.shape()));
        }
        let (g, r, q) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        if vx.cols() != q || g == 0 || vx.rows() % g != 0 {
            return Err(Error::dim("grouped_matmul", vx.shape(), vw.shape()));
        }
        let s = vx.rows() / g;
        let mut out = vec![T::zero(); g * s * r];
        for gi in 0..g {
            let wg = &vw.data()[gi * r * q..(gi + 1) * r * q];
            for si in 0..s {
                let row = gi * s + si;
                let xr = vx.row(row);
                for ri in 0..r {
                    let wr = &wg[ri * q..(ri + 1) * q];
                    let acc: f64 = xr.iter().zip(wr).map(|(a, b)| a.f64() * b.f64()).sum();
                    out[row * r + ri] = T::of(acc);
                }
            }
        }
        let out = Tensor::matrix(g * s, r, out)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(out, Op::GroupedMatmulT { x, w }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(idx)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Adds row `r` of `x` into row `idx[r]` of an `n_rows`-row zero matrix.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || vx.rows() != idx.len() || idx.iter().any(|&i| i >= n_rows) {
            return Err(Error::dim("scatter_add_rows", vx.shape(), &[n_rows]));
        }
        let c = vx.cols();
        let mut out = Tensor::zeros(&[n_rows, c]);
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..c {
                let d = &mut out.data_mut()[i * c + j];
                *d = *d + vx.at(r, j);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::ScatterAddRows(x, idx.to_vec()), rg))
    }

    /// Picks entries by flat index into a new tensor of `shape`.
    pub fn gather(&mut self, x: Var, flat: &[usize], shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if flat.iter().any(|&i| i >= vx.numel()) {
            return Err(Error::dim("gather", vx.shape(), shape));
        }
        let out = Tensor::new(shape.to_vec(), flat.iter().map(|&i| vx.data()[i]).collect())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Gather(x, flat.to_vec()), rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.matmul_nt(self.value(*b))?;
                    self.acc(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).matmul_tn(g)?;
                    self.acc(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()?),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    let sums = g.axis_sums(0);
                    let gb = Tensor::new(
                        self.shape(*b).to_vec(),
                        sums.into_iter().map(T::of).collect(),
                    )?;
                    self.acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.acc(grads, *a, g.zip_map(vb, |u, v| u * v));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, g.zip_map(va, |u, v| u * v));
                }
            }
            Op::Scale(x, c) => {
                let k = T::of(*c);
                self.acc(grads, *x, g.map(|v| v * k));
            }
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::ScaleRows(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let c = vx.cols();
                if self.requires_grad(*x) {
                    let mut gx = g.clone();
                    for (i, v) in gx.data_mut().iter_mut().enumerate() {
                        *v = *v * vs.data()[i / c];
                    }
                    self.acc(grads, *x, gx);
                }
                if self.requires_grad(*s) {
                    let mut gs = vec![T::zero(); vs.numel()];
                    for (r, out) in gs.iter_mut().enumerate() {
                        let acc: f64 = g
                            .row(r)
                            .iter()
                            .zip(vx.row(r))
                            .map(|(a, b)| a.f64() * b.f64())
                            .sum();
                        *out = T::of(acc);
                    }
                    self.acc(grads, *s, Tensor::new(vs.shape().to_vec(), gs)?);
                }
            }
            Op::Relu(x) => {
                let gx = g.zip_map(y, |gv, yv| if yv > T::zero() { gv } else { T::zero() });
                self.acc(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv));
                self.acc(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv));
                self.acc(grads, *x, gx);
            }
            Op::Exp(x) => self.acc(grads, *x, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = y.axis_split(*axis);
                let mut gx = Tensor::zeros(y.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let k = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len)
                            .map(|l| g.data()[k(l)].f64() * y.data()[k(l)].f64())
                            .sum();
                        for l in 0..len {
                            gx.data_mut()[k(l)] =
                                T::of(y.data()[k(l)].f64() * (g.data()[k(l)].f64() - dot));
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::NormalizeSum(x, axis) => {
                let vx = self.value(*x);
                let sums = vx.axis_sums(*axis);
                let (outer, len, inner) = y.axis_split(*axis);
                let mut gx = Tensor::zeros(y.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let k = |l: usize| (o * len + l) * inner + i;
                        let s = sums[o * inner + i];
                        let dot: f64 = (0..len)
                            .map(|l| g.data()[k(l)].f64() * y.data()[k(l)].f64())
                            .sum();
                        for l in 0..len {
                            gx.data_mut()[k(l)] = T::of((g.data()[k(l)].f64() - dot) / s);
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = y.cols();
                let rows = inv_std.len();
                let vg = self.value(*gamma);
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut gg = vec![0.0f64; c];
                    let mut gb = vec![0.0f64; c];
                    for r in 0..rows {
                        for j in 0..c {
                            let gv = g.data()[r * c + j].f64();
                            gg[j] += gv * xhat[r * c + j];
                            gb[j] += gv;
                        }
                    }
                    let shape_g = self.shape(*gamma).to_vec();
                    let shape_b = self.shape(*beta).to_vec();
                    self.acc(grads, *gamma, Tensor::new(shape_g, gg.into_iter().map(T::of).collect())?);
                    self.acc(grads, *beta, Tensor::new(shape_b, gb.into_iter().map(T::of).collect())?);
                }
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(y.shape());
                    let mut dxhat = vec![0.0f64; c];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = g.data()[r * c + j].f64() * vg.data()[j].f64();
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[r * c + j];
                        }
                        let cf = c as f64;
                        for j in 0..c {
                            let v = inv_std[r] / cf * (cf * dxhat[j] - s1 - xhat[r * c + j] * s2);
                            gx.data_mut()[r * c + j] = T::of(v);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Mask(x, mask) => {
                let mut gx = g.clone();
                for (v, m) in gx.data_mut().iter_mut().zip(mask) {
                    *v = *v * *m;
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        self.acc(grads, *p, g.slice_cols(start, start + w)?);
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    if self.requires_grad(*p) {
                        self.acc(grads, *p, g.slice_rows(start, start + h)?);
                    }
                    start += h;
                }
            }
            Op::SliceCols(x, start) => {
                let vx = self.value(*x);
                let (m, n) = (vx.rows(), vx.cols());
                let w = g.cols();
                let mut gx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    gx.data_mut()[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
                }
                self.acc(grads, *x, gx);
            }
            Op::SliceRows(x, start) => {
                let vx = self.value(*x);
                let n = vx.cols();
                let mut gx = Tensor::zeros(vx.shape());
                gx.data_mut()[start * n..start * n + g.numel()].copy_from_slice(g.data());
                self.acc(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.shape(*x))?;
                self.acc(grads, *x, gx);
            }
            Op::MeanRows(x) => {
                let vx = self.value(*x);
                let (m, c) = (vx.rows(), vx.cols());
                let inv = 1.0 / m as f64;
                let mut gx = Tensor::zeros(&[m, c]);
                for i in 0..m {
                    for j in 0..c {
                        gx.data_mut()[i * c + j] = T::of(g.data()[j].f64() * inv);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::MaxRows(x, arg) => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut gx = Tensor::zeros(vx.shape());
                for (j, &i) in arg.iter().enumerate() {
                    gx.data_mut()[i * c + j] = g.data()[j];
                }
                self.acc(grads, *x, gx);
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.shape(*x), g.data()[0]);
                self.acc(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let scale = g.data()[0].f64();
                let gl: Vec<T> = probs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        T::of(scale * (p - onehot))
                    })
                    .collect();
                self.acc(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), gl)?);
            }
            Op::GroupedMatmulT { x, w } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (gcount, r, q) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
                let s = vx.rows() / gcount;
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(vx.shape());
                    for gi in 0..gcount {
                        let wg = &vw.data()[gi * r * q..(gi + 1) * r * q];
                        for si in 0..s {
                            let row = gi * s + si;
                            let grow = g.row(row);
                            let mut acc = vec![0.0f64; q];
                            for (ri, gv) in grow.iter().enumerate() {
                                let gv = gv.f64();
                                for (a, wv) in acc.iter_mut().zip(&wg[ri * q..(ri + 1) * q]) {
                                    *a += gv * wv.f64();
                                }
                            }
                            for (d, a) in gx.data_mut()[row * q..(row + 1) * q].iter_mut().zip(acc) {
                                *d = T::of(a);
                            }
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0f64; gcount * r * q];
                    for gi in 0..gcount {
                        for si in 0..s {
                            let row = gi * s + si;
                            let xr = vx.row(row);
                            for (ri, gv) in g.row(row).iter().enumerate() {
                                let gv = gv.f64();
                                let base = (gi * r + ri) * q;
                                for (qi, xv) in xr.iter().enumerate() {
                                    gw[base + qi] += gv * xv.f64();
                                }
                            }
                        }
                    }
                    let gw = Tensor::new(vw.shape().to_vec(), gw.into_iter().map(T::of).collect())?;
                    self.acc(grads, *w, gw);
                }
            }
            Op::GatherRows(x, idx) => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut gx = Tensor::zeros(vx.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        let d = &mut gx.data_mut()[i * c + j];
                        *d = *d + g.at(r, j);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ScatterAddRows(x, idx) => {
                let gx = g.gather_rows(idx)?;
                self.acc(grads, *x, gx);
            }
            Op::Gather(x, flat) => {
                let mut gx = Tensor::zeros(self.shape(*x));
                for (t, &i) in flat.iter().enumerate() {
                    let d = &mut gx.data_mut()[i];
                    *d = *d + g.data()[t];
                }
                self.acc(grads, *x, gx);
            }
        }
        Ok(())
    }
}
