//! Operation recording and reverse-mode gradient accumulation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its value and enough saved state to run its vector-Jacobian
//! product. Nodes are created in topological order, so [`Graph::backward`]
//! only needs a single reverse sweep.
//!
//! Apart from `matmul`/`transpose`/`reshape`, the operations treat their
//! operands as matrices over the last dimension (`rows × cols`).

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::norm::NormState;
use super::tensor::{gemm_nt, gemm_tn, MatmulPlan, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormAxis {
    /// Statistics per column, pooled over rows.
    Columns,
    /// Statistics per row, pooled over columns.
    Rows,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var, MatmulPlan),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice {
        x: Var,
        r0: usize,
        c0: usize,
    },
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Gelu(Var),
    Softplus(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        axis: NormAxis,
        /// Statistics came from the input itself (and so depend on it).
        batch_stats: bool,
    },
    Grid {
        e: Var,
        y: Var,
        w: usize,
    },
    Im2Col {
        x: Var,
        map: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Accumulated gradients of leaf nodes.
    grads: Vec<Option<Vec<f64>>>,
}

fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction. `-inf` entries are treated as
/// masked out; every row needs at least one finite entry.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let c = t.cols();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(c) {
        let mut max = f64::NEG_INFINITY;
        for &x in row.iter() {
            if x.is_nan() || x == f64::INFINITY {
                return Err(Error::Numeric(format!("softmax input contains {x}")));
            }
            max = max.max(x);
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::Numeric("softmax row is fully masked".into()));
        }
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
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

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(value, Op::MatMul(a, b, plan), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.derived(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.derived(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.derived(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.derived(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).map(|e| e * k);
        self.derived(v, Op::Scale(x, k), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        Ok(self.derived(v, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.derived(v, Op::Reshape(x), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, c], data)?;
        Ok(self.derived(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let r = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(Error::shape("concat_cols", self.shape(first), t.shape()));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![r, total], data)?;
        Ok(self.derived(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Sub-matrix `[r0, r0+nr) × [c0, c0+nc)`.
    pub fn slice(&mut self, x: Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if r0 + nr > r || c0 + nc > c || nr == 0 || nc == 0 {
            return Err(Error::shape("slice", &[r, c], &[r0, nr, c0, nc]));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(nr * nc);
        for i in r0..r0 + nr {
            data.extend_from_slice(&t.row(i)[c0..c0 + nc]);
        }
        let v = Tensor::new(vec![nr, nc], data)?;
        Ok(self.derived(v, Op::Slice { x, r0, c0 }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, r0: usize, nr: usize) -> Result<Var> {
        let c = self.value(x).cols();
        self.slice(x, r0, nr, 0, c)
    }

    /// Row gather; indices may repeat. This is also the embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if idx.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index { index: i, bound: r });
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.derived(v, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if idx.is_empty() {
            return Err(Error::Contract("gather of zero columns".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Index { index: bad, bound: c });
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = t.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        let v = Tensor::new(vec![r, idx.len()], data)?;
        Ok(self.derived(v, Op::GatherCols(x, idx.to_vec()), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.derived(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = softmax_rows(self.value(x))?;
        Ok(self.derived(v, Op::Softmax(x), &[x]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu_scalar);
        self.derived(v, Op::Gelu(x), &[x])
    }

    /// `ln(1 + eˣ)`. With logits `a`, `-ln σ(a) = softplus(-a)` and
    /// `-ln(1 - σ(a)) = softplus(a)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus_scalar);
        self.derived(v, Op::Softplus(x), &[x])
    }

    /// Batch normalization over the rows of a `[rows, features]` matrix.
    /// Sequences are laid out with one row per (sample, time step), so
    /// statistics pool batch and time.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut NormState, train: bool) -> Result<Var> {
        let (r, c) = self.dims2(x);
        self.check_affine(x, gamma, beta, c)?;
        if state.features() != c {
            return Err(Error::shape("batchnorm state", &[r, c], &[state.features()]));
        }
        let xt = self.value(x);
        let eps = state.eps;
        let (mean, inv_std) = if train {
            if r < 2 {
                return Err(Error::Config(
                    "batch normalization in train mode needs at least 2 rows".into(),
                ));
            }
            let mut mean = vec![0.0; c];
            for row in xt.data().chunks(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= r as f64);
            let mut var = vec![0.0; c];
            for row in xt.data().chunks(c) {
                for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= r as f64);
            state.update(&mean, &var, r);
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (mean, inv)
        } else {
            let inv = state.running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (state.running_mean.clone(), inv)
        };
        let mut xhat = xt.data().to_vec();
        for row in xhat.chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }
        self.finish_norm(x, gamma, beta, xhat, inv_std, NormAxis::Columns, train)
    }

    /// Layer normalization over the last dimension of every row.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (_, c) = self.dims2(x);
        self.check_affine(x, gamma, beta, c)?;
        let mut xhat = self.value(x).data().to_vec();
        let mut inv_std = Vec::new();
        for row in xhat.chunks_mut(c) {
            let m = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - m) * s);
            inv_std.push(s);
        }
        self.finish_norm(x, gamma, beta, xhat, inv_std, NormAxis::Rows, true)
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("norm affine", self.shape(x), self.shape(gamma)));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        axis: NormAxis,
        batch_stats: bool,
    ) -> Result<Var> {
        let c = self.value(x).cols();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for ((v, gv), bv) in row.iter_mut().zip(&g).zip(&b) {
                *v = *v * gv + bv;
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::Norm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            axis,
            batch_stats,
        };
        Ok(self.derived(v, op, &[x, gamma, beta]))
    }

    /// Consistency grid: cell `(i, j)` of an `h × w` canvas holds
    /// `[e_i ; y_j]` for `i < rows(e)`, `j < rows(y)` and zeros elsewhere.
    /// Output is `[h·w, d_e + d_y]`, row-major over cells.
    pub fn grid(&mut self, e: Var, y: Var, h: usize, w: usize) -> Result<Var> {
        let (n, de) = self.dims2(e);
        let (m, dy) = self.dims2(y);
        if n > h || m > w {
            return Err(Error::shape("grid", &[n, m], &[h, w]));
        }
        let width = de + dy;
        let mut data = vec![0.0; h * w * width];
        let (te, ty) = (self.value(e), self.value(y));
        for i in 0..n {
            for j in 0..m {
                let cell = &mut data[(i * w + j) * width..][..width];
                cell[..de].copy_from_slice(te.row(i));
                cell[de..].copy_from_slice(ty.row(j));
            }
        }
        let v = Tensor::new(vec![h * w, width], data)?;
        Ok(self.derived(v, Op::Grid { e, y, w }, &[e, y]))
    }

    /// Patch extraction for a `k × k` convolution. `x` holds `batch` images
    /// of `h × w` pixels as rows (`[batch·h·w, c]`); the result has one row
    /// per output pixel with columns ordered (ky, kx, channel). Padding
    /// contributes zeros.
    #[allow(clippy::too_many_arguments)]
    pub fn im2col(
        &mut self,
        x: Var,
        batch: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if r != batch * h * w {
            return Err(Error::shape("im2col", &[r, c], &[batch, h, w]));
        }
        let (oh, ow) = conv_out(h, k, stride, pad)
            .zip(conv_out(w, k, stride, pad))
            .ok_or_else(|| {
                Error::Config(format!(
                    "{h}×{w} input is smaller than a {k}×{k} kernel with padding {pad}"
                ))
            })?;
        let mut map = Vec::with_capacity(batch * oh * ow * k * k);
        for b in 0..batch {
            for oi in 0..oh {
                for oj in 0..ow {
                    for ki in 0..k {
                        for kj in 0..k {
                            let si = (oi * stride + ki) as isize - pad as isize;
                            let sj = (oj * stride + kj) as isize - pad as isize;
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                map.push(usize::MAX);
                            } else {
                                map.push(b * h * w + si as usize * w + sj as usize);
                            }
                        }
                    }
                }
            }
        }
        let t = self.value(x);
        let mut data = vec![0.0; map.len() * c];
        for (slot, &src) in map.iter().enumerate() {
            if src != usize::MAX {
                data[slot * c..(slot + 1) * c].copy_from_slice(t.row(src));
            }
        }
        let v = Tensor::new(vec![batch * oh * ow, k * k * c], data)?;
        Ok(self.derived(v, Op::Im2Col { x, map }, &[x]))
    }

    /// Runs reverse accumulation from a scalar. Leaf gradients add onto
    /// whatever previous calls left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.node_backward(i, &gout, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(gout),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b, plan) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (p, q, r) = (plan.p, plan.q, plan.r);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for bi in 0..plan.batch {
                        let go = &gout[bi * p * r..][..p * r];
                        let bm = &tb.data()[plan.b_offset(bi)..][..q * r];
                        let off = plan.a_offset(bi);
                        gemm_nt(go, bm, &mut ga[off..off + p * q], p, q, r);
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for bi in 0..plan.batch {
                        let go = &gout[bi * p * r..][..p * r];
                        let am = &ta.data()[plan.a_offset(bi)..][..p * q];
                        let off = plan.b_offset(bi);
                        gemm_tn(am, go, &mut gb[off..off + q * r], p, q, r);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(g) = slot(nodes, grads, *a) {
                    add_into(g, gout);
                }
                if let Some(g) = slot(nodes, grads, *b) {
                    add_into(g, gout);
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = slot(nodes, grads, *a) {
                    add_into(g, gout);
                }
                if let Some(g) = slot(nodes, grads, *b) {
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(g) = slot(nodes, grads, *a) {
                    for ((x, go), bv) in g.iter_mut().zip(gout).zip(tb) {
                        *x += go * bv;
                    }
                }
                if let Some(g) = slot(nodes, grads, *b) {
                    for ((x, go), av) in g.iter_mut().zip(gout).zip(ta) {
                        *x += go * av;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(g) = slot(nodes, grads, *x) {
                    add_into(g, gout);
                }
                if let Some(g) = slot(nodes, grads, *bias) {
                    let c = g.len();
                    for row in gout.chunks(c) {
                        add_into(g, row);
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(g) = slot(nodes, grads, *x) {
                    g.iter_mut().zip(gout).for_each(|(a, go)| *a += k * go);
                }
            }
            Op::Transpose(x) => {
                if let Some(g) = slot(nodes, grads, *x) {
                    let gt = Tensor::new(out.shape().to_vec(), gout.to_vec())
                        .and_then(|t| t.transpose())
                        .expect("transpose of a valid gradient");
                    add_into(g, gt.data());
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = slot(nodes, grads, *x) {
                    add_into(g, gout);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if let Some(g) = slot(nodes, grads, p) {
                        add_into(g, &gout[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut c0 = 0;
                for &p in parts {
                    let c = nodes[p.0].value.cols();
                    if let Some(g) = slot(nodes, grads, p) {
                        for (grow, orow) in g.chunks_mut(c).zip(gout.chunks(total)) {
                            add_into(grow, &orow[c0..c0 + c]);
                        }
                    }
                    c0 += c;
                }
            }
            Op::Slice { x, r0, c0 } => {
                let c = nodes[x.0].value.cols();
                let nc = out.cols();
                if let Some(g) = slot(nodes, grads, *x) {
                    for (k, orow) in gout.chunks(nc).enumerate() {
                        let start = (r0 + k) * c + c0;
                        add_into(&mut g[start..start + nc], orow);
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let c = out.cols();
                if let Some(g) = slot(nodes, grads, *x) {
                    for (orow, &src) in gout.chunks(c).zip(idx) {
                        add_into(&mut g[src * c..(src + 1) * c], orow);
                    }
                }
            }
            Op::GatherCols(x, idx) => {
                let c = nodes[x.0].value.cols();
                if let Some(g) = slot(nodes, grads, *x) {
                    for (grow, orow) in g.chunks_mut(c).zip(gout.chunks(idx.len())) {
                        for (&j, &go) in idx.iter().zip(orow) {
                            grow[j] += go;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = slot(nodes, grads, *x) {
                    g.iter_mut().for_each(|a| *a += gout[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(g) = slot(nodes, grads, *x) {
                    let k = gout[0] / g.len() as f64;
                    g.iter_mut().for_each(|a| *a += k);
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                if let Some(g) = slot(nodes, grads, *x) {
                    for ((grow, orow), yrow) in g.chunks_mut(c).zip(gout.chunks(c)).zip(out.data().chunks(c)) {
                        let dot: f64 = orow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((gv, go), y) in grow.iter_mut().zip(orow).zip(yrow) {
                            *gv += y * (go - dot);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = nodes[x.0].value.data();
                if let Some(g) = slot(nodes, grads, *x) {
                    for ((gv, go), &v) in g.iter_mut().zip(gout).zip(xs) {
                        *gv += go * (std_normal_cdf(v) + v * std_normal_pdf(v));
                    }
                }
            }
            Op::Softplus(x) => {
                let xs = nodes[x.0].value.data();
                if let Some(g) = slot(nodes, grads, *x) {
                    for ((gv, go), &v) in g.iter_mut().zip(gout).zip(xs) {
                        *gv += go * sigmoid_scalar(v);
                    }
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                axis,
                batch_stats,
            } => {
                let c = out.cols();
                let gam = nodes[gamma.0].value.data();
                if let Some(g) = slot(nodes, grads, *gamma) {
                    for (orow, hrow) in gout.chunks(c).zip(xhat.chunks(c)) {
                        for ((gv, go), h) in g.iter_mut().zip(orow).zip(hrow) {
                            *gv += go * h;
                        }
                    }
                }
                if let Some(g) = slot(nodes, grads, *beta) {
                    for orow in gout.chunks(c) {
                        add_into(g, orow);
                    }
                }
                if let Some(g) = slot(nodes, grads, *x) {
                    norm_input_grad(g, gout, xhat, inv_std, gam, c, *axis, *batch_stats);
                }
            }
            Op::Grid { e, y, w } => {
                let de = nodes[e.0].value.cols();
                let (n, m) = (nodes[e.0].value.rows(), nodes[y.0].value.rows());
                let width = out.cols();
                let dy = width - de;
                if let Some(g) = slot(nodes, grads, *e) {
                    for i in 0..n {
                        for j in 0..m {
                            let cell = &gout[(i * w + j) * width..][..width];
                            add_into(&mut g[i * de..(i + 1) * de], &cell[..de]);
                        }
                    }
                }
                if let Some(g) = slot(nodes, grads, *y) {
                    for i in 0..n {
                        for j in 0..m {
                            let cell = &gout[(i * w + j) * width..][..width];
                            add_into(&mut g[j * dy..(j + 1) * dy], &cell[de..]);
                        }
                    }
                }
            }
            Op::Im2Col { x, map } => {
                let c = nodes[x.0].value.cols();
                if let Some(g) = slot(nodes, grads, *x) {
                    for (slot_idx, &src) in map.iter().enumerate() {
                        if src != usize::MAX {
                            add_into(&mut g[src * c..(src + 1) * c], &gout[slot_idx * c..][..c]);
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffer of `v`, or None when `v` is not tracked.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

pub(crate) fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[allow(clippy::too_many_arguments)]
fn norm_input_grad(
    g: &mut [f64],
    gout: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    c: usize,
    axis: NormAxis,
    batch_stats: bool,
) {
    let r = gout.len() / c;
    match axis {
        NormAxis::Columns => {
            let mut sum_d = vec![0.0; c];
            let mut sum_dh = vec![0.0; c];
            if batch_stats {
                for (orow, hrow) in gout.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        let d = orow[j] * gamma[j];
                        sum_d[j] += d;
                        sum_dh[j] += d * hrow[j];
                    }
                }
            }
            let n = r as f64;
            for ((grow, orow), hrow) in g.chunks_mut(c).zip(gout.chunks(c)).zip(xhat.chunks(c)) {
                for j in 0..c {
                    let d = orow[j] * gamma[j];
                    grow[j] += if batch_stats {
                        inv_std[j] * (d - sum_d[j] / n - hrow[j] * sum_dh[j] / n)
                    } else {
                        inv_std[j] * d
                    };
                }
            }
        }
        NormAxis::Rows => {
            let n = c as f64;
            for (k, ((grow, orow), hrow)) in g.chunks_mut(c).zip(gout.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                let mut sum_d = 0.0;
                let mut sum_dh = 0.0;
                for j in 0..c {
                    let d = orow[j] * gamma[j];
                    sum_d += d;
                    sum_dh += d * hrow[j];
                }
                for j in 0..c {
                    let d = orow[j] * gamma[j];
                    grow[j] += inv_std[k] * (d - sum_d / n - hrow[j] * sum_dh / n);
                }
            }
        }
    }
}
