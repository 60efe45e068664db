//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends
//! a node holding its output value and enough saved state to run its local
//! backward rule; [`Graph::backward`] then walks the tape in reverse,
//! accumulating gradients only into nodes that (transitively) depend on a
//! leaf created with `requires_grad = true`. Frozen weights are plain leaves
//! without gradient, so no work is spent on them.
//!
//! Operations are deliberately coarse (whole attention, whole layer norm):
//! fewer nodes, and each backward rule is checked against central finite
//! differences in the tests.

mod gradcheck;

use alloc::vec;
use alloc::vec::Vec;

pub use gradcheck::{grad_check, grad_check_many, relative_error};

use crate::error::{bail, Error, Result};
use crate::math;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn_acc, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddTiled(Var, Var),
    RowScale(Var, Var),
    Affine(Var, f64),
    Pow(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SelectRows(Var, Vec<usize>),
    PrependToken {
        rest: Var,
        token: Var,
        batch: usize,
    },
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    RowNormalize(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Smallest norm used by [`Graph::row_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// A single-use tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("gradient shape"))
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.last_dim())
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut [f64] {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf; gradients are collected for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            bail!(Dimension, "{what}: shapes {:?} and {:?} differ", sa, sb);
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            bail!(Dimension, "matmul {:?} x {:?}", av.shape(), bv.shape());
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = Tensor::new(vec![n, m], matmul_nn(av.data(), bv.data(), n, k, m))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, "elementwise")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[n, m] + bias[m]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let m = xv.last_dim();
        if bv.len() != m {
            bail!(Dimension, "bias of {} for rows of {}", bv.len(), m);
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(m) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x[b*t, m] + tile[t, m]`, repeating `tile` for each of the `b` blocks.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(tile));
        if xv.last_dim() != tv.last_dim() || xv.len() % tv.len() != 0 {
            bail!(Dimension, "cannot tile {:?} over {:?}", tv.shape(), xv.shape());
        }
        let mut data = xv.data().to_vec();
        for block in data.chunks_mut(tv.len()) {
            for (v, t) in block.iter_mut().zip(tv.data()) {
                *v += t;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddTiled(x, tile), &[x, tile]))
    }

    /// Scale row `i` of `x[n, m]` by `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (n, m) = rows_cols(xv);
        if sv.len() != n {
            bail!(Dimension, "row scale of {} for {} rows", sv.len(), n);
        }
        let mut data = xv.data().to_vec();
        for (row, &k) in data.chunks_mut(m).zip(sv.data()) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::RowScale(x, s), &[x, s]))
    }

    /// Elementwise `a * x + b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        self.unary(x, Op::Affine(x, a), |v| a * v + b)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    /// Elementwise `x^p` for nonnegative `x`.
    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Op::Pow(x, p), |v| math::pow(v, p))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), math::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), math::ln)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), math::sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + math::erf(v * core::f64::consts::FRAC_1_SQRT_2))
        })
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(m) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(m) {
            let lse = math::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of the row width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, m) = rows_cols(xv);
        if gv.len() != m || bv.len() != m {
            bail!(Dimension, "layer norm affine of {}/{} for width {}", gv.len(), bv.len(), m);
        }
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / math::sqrt(var + eps);
            rstd[i] = r;
            for j in 0..m {
                let h = (row[j] - mean) * r;
                xhat[i * m + j] = h;
                out[i * m + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    /// Scaled dot-product attention over packed projections.
    ///
    /// `qkv` is `[batch * tokens, 3 * d]` with query, key and value blocks
    /// side by side; `d` is split evenly over `heads`. Returns `[batch * tokens, d]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let qv = self.value(qkv);
        let (n, w) = rows_cols(qv);
        if n != batch * tokens || w % 3 != 0 {
            bail!(Dimension, "attention input {:?} for {batch}x{tokens}", qv.shape());
        }
        let d = w / 3;
        if heads == 0 || d % heads != 0 {
            bail!(Config, "width {d} not divisible by {heads} heads");
        }
        let dh = d / heads;
        let inv = 1.0 / math::sqrt(dh as f64);
        let src = qv.data();
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        let mut out = vec![0.0; n * d];
        for s in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(s * heads + h) * tokens * tokens..][..tokens * tokens];
                for t in 0..tokens {
                    let q = &src[(s * tokens + t) * w + h * dh..][..dh];
                    let prow = &mut p[t * tokens..(t + 1) * tokens];
                    for u in 0..tokens {
                        let k = &src[(s * tokens + u) * w + d + h * dh..][..dh];
                        prow[u] = inv * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
                    }
                    softmax_in_place(prow);
                    let o = &mut out[(s * tokens + t) * d + h * dh..][..dh];
                    for u in 0..tokens {
                        let v = &src[(s * tokens + u) * w + 2 * d + h * dh..][..dh];
                        let pu = prow[u];
                        o.iter_mut().zip(v).for_each(|(ov, vv)| *ov += pu * vv);
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let op = Op::Attention {
            qkv,
            batch,
            tokens,
            heads,
            probs,
        };
        Ok(self.push(out, op, &[qkv]))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= xv.rows()) {
            bail!(Dimension, "row selection out of range for {} rows", xv.rows());
        }
        let out = xv.select_rows(idx);
        Ok(self.push(out, Op::SelectRows(x, idx.to_vec()), &[x]))
    }

    /// Insert `token[m]` before each of the `batch` blocks of `rest[batch * k, m]`.
    pub fn prepend_token(&mut self, rest: Var, token: Var, batch: usize) -> Result<Var> {
        let (rv, tv) = (self.value(rest), self.value(token));
        let (n, m) = rows_cols(rv);
        if tv.len() != m || batch == 0 || n % batch != 0 {
            bail!(Dimension, "prepend {:?} to {:?} in {batch} blocks", tv.shape(), rv.shape());
        }
        let k = n / batch;
        let mut data = Vec::with_capacity((n + batch) * m);
        for s in 0..batch {
            data.extend_from_slice(tv.data());
            data.extend_from_slice(&rv.data()[s * k * m..(s + 1) * k * m]);
        }
        let out = Tensor::new(vec![n + batch, m], data)?;
        let op = Op::PrependToken { rest, token, batch };
        Ok(self.push(out, op, &[rest, token]))
    }

    /// Pick `x[i, idx[i]]` for every row, giving `[n]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = rows_cols(xv);
        if idx.len() != n || idx.iter().any(|&j| j >= m) {
            bail!(Dimension, "gather of {} indices from [{n}, {m}]", idx.len());
        }
        let data = idx.iter().enumerate().map(|(i, &j)| xv.data()[i * m + j]).collect();
        let out = Tensor::new(vec![n], data)?;
        Ok(self.push(out, Op::Gather(x, idx.to_vec()), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Divide each row by `max(‖row‖₂, NORM_FLOOR)`.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = rows_cols(xv);
        let mut data = xv.data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in data.chunks_mut(m) {
            let nrm = math::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::RowNormalize(x, norms), &[x])
    }

    /// Gradients of the scalar `output` with respect to every node that requires one.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let ov = self.value(output);
        if ov.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar output, got shape {:?}",
                ov.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return Ok(self.finish(grads));
        }
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.backward_node(node, g, lower);
        }
        Ok(self.finish(grads))
    }

    fn finish(&self, mut grads: Vec<Option<Vec<f64>>>) -> Gradients {
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let da = matmul_nt(g, bv.data(), n, m, k);
                    let slot = acc(&mut grads[a.0], n * k);
                    slot.iter_mut().zip(&da).for_each(|(s, d)| *s += d);
                }
                if self.wants(*b) {
                    let slot = acc(&mut grads[b.0], k * m);
                    matmul_tn_acc(slot, av.data(), g, n, k, m);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let slot = acc(&mut grads[x.0], r * c);
                for i in 0..r {
                    for j in 0..c {
                        slot[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::Reshape(x) => add_into(acc(&mut grads[x.0], g.len()), g, 1.0),
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(acc(&mut grads[v.0], g.len()), g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(acc(&mut grads[a.0], g.len()), g, 1.0);
                }
                if self.wants(*b) {
                    add_into(acc(&mut grads[b.0], g.len()), g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let slot = acc(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        slot[i] += g[i] * bv[i];
                    }
                }
                if self.wants(*b) {
                    let slot = acc(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        slot[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    add_into(acc(&mut grads[x.0], g.len()), g, 1.0);
                }
                if self.wants(*b) {
                    let m = node.value.last_dim();
                    let slot = acc(&mut grads[b.0], m);
                    for row in g.chunks(m) {
                        add_into(slot, row, 1.0);
                    }
                }
            }
            Op::AddTiled(x, t) => {
                if self.wants(*x) {
                    add_into(acc(&mut grads[x.0], g.len()), g, 1.0);
                }
                if self.wants(*t) {
                    let tl = self.value(*t).len();
                    let slot = acc(&mut grads[t.0], tl);
                    for block in g.chunks(tl) {
                        add_into(slot, block, 1.0);
                    }
                }
            }
            Op::RowScale(x, s) => {
                let (n, m) = rows_cols(&node.value);
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                if self.wants(*x) {
                    let slot = acc(&mut grads[x.0], n * m);
                    for i in 0..n {
                        for j in 0..m {
                            slot[i * m + j] += g[i * m + j] * sv[i];
                        }
                    }
                }
                if self.wants(*s) {
                    let slot = acc(&mut grads[s.0], n);
                    for i in 0..n {
                        slot[i] += (0..m).map(|j| g[i * m + j] * xv[i * m + j]).sum::<f64>();
                    }
                }
            }
            Op::Affine(x, a) => add_into(acc(&mut grads[x.0], g.len()), g, *a),
            Op::Pow(x, p) => {
                let xv = self.value(*x).data();
                let slot = acc(&mut grads[x.0], g.len());
                if *p != 0.0 {
                    for i in 0..g.len() {
                        slot[i] += g[i] * p * math::pow(xv[i], p - 1.0);
                    }
                }
            }
            Op::Exp(x) => {
                let slot = acc(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    slot[i] += g[i] * y[i];
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let slot = acc(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    slot[i] += g[i] / xv[i];
                }
            }
            Op::Sigmoid(x) => {
                let slot = acc(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    slot[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let slot = acc(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        slot[i] += g[i];
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let slot = acc(&mut grads[x.0], g.len());
                let c = 1.0 / math::sqrt(2.0 * core::f64::consts::PI);
                for i in 0..g.len() {
                    let v = xv[i];
                    let cdf = 0.5 * (1.0 + math::erf(v * core::f64::consts::FRAC_1_SQRT_2));
                    let pdf = c * math::exp(-0.5 * v * v);
                    slot[i] += g[i] * (cdf + v * pdf);
                }
            }
            Op::Softmax(x) => {
                let m = node.value.last_dim();
                let slot = acc(&mut grads[x.0], g.len());
                for ((sr, yr), gr) in slot.chunks_mut(m).zip(y.chunks(m)).zip(g.chunks(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        sr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let m = node.value.last_dim();
                let slot = acc(&mut grads[x.0], g.len());
                for ((sr, yr), gr) in slot.chunks_mut(m).zip(y.chunks(m)).zip(g.chunks(m)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..m {
                        sr[j] += gr[j] - math::exp(yr[j]) * gs;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, m) = rows_cols(&node.value);
                let gv = self.value(*gamma).data();
                if self.wants(*x) {
                    let slot = acc(&mut grads[x.0], n * m);
                    let mut dxhat = vec![0.0; m];
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        let hr = &xhat[i * m..(i + 1) * m];
                        for j in 0..m {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dh =
                            dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            slot[i * m + j] += rstd[i] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if self.wants(*gamma) {
                    let slot = acc(&mut grads[gamma.0], m);
                    for i in 0..n {
                        for j in 0..m {
                            slot[j] += g[i * m + j] * xhat[i * m + j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let slot = acc(&mut grads[beta.0], m);
                    for row in g.chunks(m) {
                        add_into(slot, row, 1.0);
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                tokens,
                heads,
                probs,
            } => {
                let (batch, tokens, heads) = (*batch, *tokens, *heads);
                let src = self.value(*qkv).data();
                let d = node.value.last_dim();
                let w = 3 * d;
                let dh = d / heads;
                let inv = 1.0 / math::sqrt(dh as f64);
                let slot = acc(&mut grads[qkv.0], batch * tokens * w);
                let mut dp = vec![0.0; tokens];
                for s in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(s * heads + h) * tokens * tokens..][..tokens * tokens];
                        for t in 0..tokens {
                            let go = &g[(s * tokens + t) * d + h * dh..][..dh];
                            let prow = &p[t * tokens..(t + 1) * tokens];
                            // dP and dV
                            for u in 0..tokens {
                                let vrow = (s * tokens + u) * w + 2 * d + h * dh;
                                let v = &src[vrow..vrow + dh];
                                dp[u] = go.iter().zip(v).map(|(a, b)| a * b).sum();
                                let dv = &mut slot[vrow..vrow + dh];
                                dv.iter_mut().zip(go).for_each(|(x, o)| *x += prow[u] * o);
                            }
                            let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            // dS -> dQ, dK
                            let qrow = (s * tokens + t) * w + h * dh;
                            for u in 0..tokens {
                                let ds = prow[u] * (dp[u] - dot) * inv;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = (s * tokens + u) * w + d + h * dh;
                                for j in 0..dh {
                                    slot[qrow + j] += ds * src[krow + j];
                                    slot[krow + j] += ds * src[qrow + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::SelectRows(x, idx) => {
                let m = node.value.last_dim();
                let xl = self.value(*x).len();
                let slot = acc(&mut grads[x.0], xl);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut slot[i * m..(i + 1) * m], &g[r * m..(r + 1) * m], 1.0);
                }
            }
            Op::PrependToken { rest, token, batch } => {
                let m = node.value.last_dim();
                let rl = self.value(*rest).len();
                let k = rl / m / batch;
                for s in 0..*batch {
                    let base = s * (k + 1) * m;
                    if self.wants(*token) {
                        add_into(acc(&mut grads[token.0], m), &g[base..base + m], 1.0);
                    }
                    if self.wants(*rest) {
                        let slot = acc(&mut grads[rest.0], rl);
                        add_into(
                            &mut slot[s * k * m..(s + 1) * k * m],
                            &g[base + m..base + (k + 1) * m],
                            1.0,
                        );
                    }
                }
            }
            Op::Gather(x, idx) => {
                let xv = self.value(*x);
                let m = xv.last_dim();
                let slot = acc(&mut grads[x.0], xv.len());
                for (i, &j) in idx.iter().enumerate() {
                    slot[i * m + j] += g[i];
                }
            }
            Op::Sum(x) => {
                let xl = self.value(*x).len();
                acc(&mut grads[x.0], xl).iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Mean(x) => {
                let xl = self.value(*x).len();
                let k = g[0] / xl as f64;
                acc(&mut grads[x.0], xl).iter_mut().for_each(|s| *s += k);
            }
            Op::RowNormalize(x, norms) => {
                let m = node.value.last_dim();
                let slot = acc(&mut grads[x.0], g.len());
                for (i, &nrm) in norms.iter().enumerate() {
                    let yr = &y[i * m..(i + 1) * m];
                    let gr = &g[i * m..(i + 1) * m];
                    let sr = &mut slot[i * m..(i + 1) * m];
                    let dot = if nrm > NORM_FLOOR {
                        yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>()
                    } else {
                        0.0
                    };
                    for j in 0..m {
                        sr[j] += (gr[j] - yr[j] * dot) / nrm;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
