use super::gemm::gemm;
use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
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
    Matmul { a: Var, b: Var, tb: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Extremum { x: Var, arg: Vec<usize> },
    NormalizeSum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// What a backward pass touched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardReport {
    /// Recorded operations that received a gradient, each visited once.
    pub visited: usize,
}

/// A record of primitive operations for one forward computation.
///
/// Nodes are appended in evaluation order, so the index order is already a
/// topological order and the backward sweep is a single reverse scan.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf; gradients accumulate into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// A gradient-free copy of `x`: nothing flows back through the result.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, or zeros of the leaf's shape when none arrived.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape().to_vec()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- linear

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb, tb) {
            ([m, k], [k2, n], false) if k == k2 => (*m, *k, *n),
            ([m, k], [n, k2], true) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::dim(format!(
                    "matmul{}: cannot multiply {sa:?} by {sb:?}",
                    if tb { "_t" } else { "" }
                )))
            }
        };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            tb,
            &mut out,
            false,
        );
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b, tb }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new([c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    // ----------------------------------------------------------- elementwise

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&e| f(e)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.map(x, |e| e * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    fn check_row(&self, x: Var, row: Var, what: &str) -> Result<usize> {
        let (sx, sr) = (self.value(x).shape(), self.value(row).shape());
        match (sx.last(), sr) {
            (Some(&n), [m]) if n == *m => Ok(n),
            _ => Err(Error::dim(format!(
                "{what}: row {sr:?} does not match trailing axis of {sx:?}"
            ))),
        }
    }

    /// Adds a length-`n` row to every trailing slice of `x` (bias broadcast).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.check_row(x, row, "add_row")?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, e) in value.data_mut().iter_mut().enumerate() {
            *e += r[i % n];
        }
        Ok(self.push(value, Op::AddRow { x, row }, &[x, row]))
    }

    /// Multiplies every trailing slice of `x` elementwise by a length-`n` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.check_row(x, row, "mul_row")?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, e) in value.data_mut().iter_mut().enumerate() {
            *e *= r[i % n];
        }
        Ok(self.push(value, Op::MulRow { x, row }, &[x, row]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()));
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Numeric(format!("log of non-positive value {bad}")));
        }
        let value = self.map(x, f64::ln);
        Ok(self.push(value, Op::Log(x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let value = self.map(x, |v| v.max(floor));
        self.push(value, Op::ClampMin(x, floor), &[x])
    }

    // ---------------------------------------------------------- normalizers

    fn check_finite(&self, x: Var, what: &str) -> Result<()> {
        if self.value(x).is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what}: non-finite input")))
        }
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_finite(x, "softmax")?;
        let value = softmax_along(self.value(x), axis)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_finite(x, "log_softmax")?;
        let src = self.value(x);
        let (outer, len, inner) = axis_split(src.shape(), axis)?;
        let mut out = src.data().to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| out[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|i| (out[at(i)] - max).exp()).sum::<f64>().ln();
                for i in 0..len {
                    out[at(i)] -= lse;
                }
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalizes each trailing slice to zero mean and unit variance
    /// (no affine; see [`Tape::mul_row`] / [`Tape::add_row`]).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let n = *src
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm of a scalar"))?;
        let rows = src.numel() / n;
        let mut xhat = Vec::with_capacity(src.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let s = &src.data()[r * n..(r + 1) * n];
            let mean = s.iter().sum::<f64>() / n as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            xhat.extend(s.iter().map(|v| (v - mean) * is));
        }
        let value = Tensor::new(src.shape().to_vec(), xhat.clone())?;
        Ok(self.push(value, Op::LayerNorm { x, xhat, inv_std }, &[x]))
    }

    /// Divides `x` by the sum of all its entries. The sum must be positive.
    pub fn normalize_sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Numeric(format!("normalize_sum: total mass {s}")));
        }
        let value = self.map(x, |v| v / s);
        Ok(self.push(value, Op::NormalizeSum(x), &[x]))
    }

    // ------------------------------------------------------------- structure

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let src = self.value(x);
        let (outer, len, inner) = axis_split(src.shape(), axis)?;
        if start >= end || end > len {
            return Err(Error::dim(format!(
                "slice {start}..{end} out of range for axis {axis} of {:?}",
                src.shape()
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&src.data()[base..base + w * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = w;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        let (outer, len, inner) = axis_split(src.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for j in 0..inner {
                    out[o * inner + j] += src.data()[(o * len + i) * inner + j];
                }
            }
        }
        let value = Tensor::new(drop_axis(src.shape(), axis), out)?;
        Ok(self.push(value, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.extremum(x, axis, |cand, best| cand > best)
    }

    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.extremum(x, axis, |cand, best| cand < best)
    }

    /// First index wins ties.
    fn extremum(&mut self, x: Var, axis: usize, better: impl Fn(f64, f64) -> bool) -> Result<Var> {
        let src = self.value(x);
        let (outer, len, inner) = axis_split(src.shape(), axis)?;
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mut best = 0;
                for i in 1..len {
                    if better(src.data()[at(i)], src.data()[at(best)]) {
                        best = i;
                    }
                }
                out.push(src.data()[at(best)]);
                arg.push(at(best));
            }
        }
        let value = Tensor::new(drop_axis(src.shape(), axis), out)?;
        Ok(self.push(value, Op::Extremum { x, arg }, &[x]))
    }

    // -------------------------------------------------------------- backward

    /// Propagates d(root)/d(leaf) into every trainable leaf reachable from
    /// `root`. Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<BackwardReport> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        let mut visited = 0;

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            visited += 1;
            let mut send = |v: Var, grad: Vec<f64>| {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut adj[v.0], grad);
                }
            };
            let y = node.value.data();
            match &node.op {
                Op::Leaf => leaf_grads.push((idx, g)),
                Op::Matmul { a, b, tb } => {
                    let (m, k) = self.nodes[a.0].value.dims2()?;
                    let n = node.value.shape()[1];
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    if self.nodes[a.0].requires_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, bv, !tb, &mut da, false);
                        send(*a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![0.0; k * n];
                        if *tb {
                            gemm(n, m, k, &g, true, av, false, &mut db, false);
                        } else {
                            gemm(k, m, n, av, true, &g, false, &mut db, false);
                        }
                        send(*b, db);
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = self.nodes[x.0].value.dims2()?;
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j * r + i];
                        }
                    }
                    send(*x, dx);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|v| -v).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    send(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                    send(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
                Op::Scale(x, f) => send(*x, g.iter().map(|v| v * f).collect()),
                Op::AddRow { x, row } => {
                    let n = self.nodes[row.0].value.numel();
                    let mut dr = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        dr[i % n] += v;
                    }
                    send(*row, dr);
                    send(*x, g);
                }
                Op::MulRow { x, row } => {
                    let n = self.nodes[row.0].value.numel();
                    let (xv, rv) = (self.nodes[x.0].value.data(), self.nodes[row.0].value.data());
                    let mut dr = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        dr[i % n] += v * xv[i];
                    }
                    send(*row, dr);
                    send(*x, g.iter().enumerate().map(|(i, v)| v * rv[i % n]).collect());
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis)?;
                    let mut dx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                dx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::LogSoftmax { x, axis } => {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis)?;
                    let mut dx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let total: f64 = (0..len).map(|i| g[at(i)]).sum();
                            for i in 0..len {
                                dx[at(i)] = g[at(i)] - y[at(i)].exp() * total;
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let n = *node.value.shape().last().expect("rank >= 1");
                    let mut dx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gs = &g[r * n..(r + 1) * n];
                        let hs = &xhat[r * n..(r + 1) * n];
                        let mg = gs.iter().sum::<f64>() / n as f64;
                        let mgh = gs.iter().zip(hs).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for i in 0..n {
                            dx[r * n + i] = is * (gs[i] - mg - hs[i] * mgh);
                        }
                    }
                    send(*x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.nodes[x.0].value.data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| {
                            let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect();
                    send(*x, dx);
                }
                Op::Log(x) => {
                    let xv = self.nodes[x.0].value.data();
                    send(*x, g.iter().zip(xv).map(|(g, v)| g / v).collect());
                }
                Op::Exp(x) => send(*x, g.iter().zip(y).map(|(g, y)| g * y).collect()),
                Op::ClampMin(x, floor) => {
                    let xv = self.nodes[x.0].value.data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(g, v)| if v > floor { *g } else { 0.0 })
                        .collect();
                    send(*x, dx);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = axis_split(node.value.shape(), *axis)?;
                    let mut offset = 0;
                    for v in inputs {
                        let len = self.nodes[v.0].value.shape()[*axis];
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        offset += len;
                        send(*v, dx);
                    }
                }
                Op::Slice { x, axis, start } => {
                    let src = &self.nodes[x.0].value;
                    let (outer, len, inner) = axis_split(src.shape(), *axis)?;
                    let w = node.value.shape()[*axis];
                    let mut dx = vec![0.0; src.numel()];
                    for o in 0..outer {
                        let base = (o * len + start) * inner;
                        dx[base..base + w * inner]
                            .copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                    }
                    send(*x, dx);
                }
                Op::Reshape(x) => send(*x, g),
                Op::Sum(x) => send(*x, vec![g[0]; self.nodes[x.0].value.numel()]),
                Op::Mean(x) => {
                    let n = self.nodes[x.0].value.numel();
                    send(*x, vec![g[0] / n as f64; n]);
                }
                Op::SumAxis { x, axis } => {
                    let (outer, len, inner) = axis_split(self.nodes[x.0].value.shape(), *axis)?;
                    let mut dx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for i in 0..len {
                            for j in 0..inner {
                                dx[(o * len + i) * inner + j] = g[o * inner + j];
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::Extremum { x, arg, .. } => {
                    let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                    for (gv, &at) in g.iter().zip(arg) {
                        dx[at] += gv;
                    }
                    send(*x, dx);
                }
                Op::NormalizeSum(x) => {
                    let s: f64 = self.nodes[x.0].value.data().iter().sum();
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    send(*x, g.iter().map(|v| (v - dot) / s).collect());
                }
            }
        }

        for (idx, g) in leaf_grads {
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(BackwardReport { visited })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, grad: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&grad) {
                *a += b;
            }
        }
        None => *slot = Some(grad),
    }
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &e)| e)
        .collect()
}

/// Numerically stable softmax of a plain tensor along `axis`.
pub(crate) fn softmax_along(src: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(src.shape(), axis)?;
    let mut out = src.data().to_vec();
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let max = (0..len).map(|i| out[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..len {
                let e = (out[at(i)] - max).exp();
                out[at(i)] = e;
                total += e;
            }
            for i in 0..len {
                out[at(i)] /= total;
            }
        }
    }
    Tensor::new(src.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vals(tape: &Tape, v: Var) -> Vec<f64> {
        tape.value(v).data().to_vec()
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let mut t = Tape::new();
        let eye = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = t.constant(Tensor::matrix(2, 2, vec![5.0, -1.0, 2.5, 7.0]).unwrap());
        let y = t.matmul(eye, x).unwrap();
        assert_eq!(vals(&t, y), vals(&t, x));

        let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ones = t.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let c = t.matmul(a, ones).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 1]);
        assert_eq!(vals(&t, c), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("dimension"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let u = t.constant(Tensor::vector(vec![0.0; 3]));
        let s = t.softmax(u, 0).unwrap();
        for v in vals(&t, s) {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
        let l = t.constant(Tensor::vector(vec![1f64.ln(), 3f64.ln()]));
        let s = t.softmax(l, 0).unwrap();
        assert_abs_diff_eq!(vals(&t, s)[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(vals(&t, s)[1], 0.75, epsilon = 1e-12);
        let big = t.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = t.softmax(big, 0).unwrap();
        let v = vals(&t, s);
        assert!(v.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-12);
        assert!(v[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, f64::NAN]));
        assert!(matches!(t.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 3, vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap());
        let s = t.softmax(x, 0).unwrap();
        for v in vals(&t, s) {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![3.0; 8]));
        let y = t.layer_norm(x).unwrap();
        assert!(vals(&t, y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clamp_min_applies_floor() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1e-12]));
        let y = t.clamp_min(x, 1e-8);
        assert_eq!(vals(&t, y), vec![1e-8]);
    }

    #[test]
    fn gelu_gradient_at_zero_is_half() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.gelu(x);
        t.backward(y).unwrap();
        assert_abs_diff_eq!(t.grad(x).unwrap().item().unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = t.scale(x, 2.0);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_visits_each_op_once() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let a = t.mul(x, c).unwrap();
        let b = t.add(a, x).unwrap();
        let s = t.sum(b);
        let report = t.backward(s).unwrap();
        // x, mul, add, sum; the constant is skipped.
        assert_eq!(report.visited, 4);
        assert_eq!(t.grad(x).unwrap().data(), &[4.0, 5.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let d = t.detach(x);
        let p = t.mul(x, d).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn extremum_routes_to_first_argmax() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 2, vec![1.0, 5.0, 1.0, 2.0]).unwrap());
        let m = t.max_axis(x, 0).unwrap();
        assert_eq!(vals(&t, m), vec![1.0, 5.0]);
        let s = t.sum(m);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(vals(&t, c), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = t.slice(c, 1, 1, 3).unwrap();
        assert_eq!(vals(&t, s), vals(&t, b));
        assert!(t.slice(c, 1, 2, 4).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Numeric(_))));
    }
}
