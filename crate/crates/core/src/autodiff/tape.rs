use rayon::prelude::*;

use super::gemm::{gemm, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Reshape(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    LinearMaxPool { input: Var, weight: Var, argmax: Vec<u32> },
    LogSoftmax(Var),
    Softmax(Var),
    Nll { input: Var, targets: Vec<usize> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    /// Persistent gradient slot, present on leaves that require grad.
    grad: Option<Vec<f64>>,
    /// True when some requires-grad leaf is reachable through this node.
    tracked: bool,
    op: Op,
}

/// Recording of a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it. [`Tape::backward`] walks the prefix ending at the loss in reverse,
/// visiting each node once. Gradients of leaves accumulate across calls
/// until [`Tape::zero_grad`] clears them. A tape is meant to live for one
/// training step and then be dropped.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Leaves with `requires_grad` get a zeroed gradient slot.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.numel()]);
        self.nodes.push(Node {
            value,
            grad,
            tracked: requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Copy of `x` that blocks gradient flow back into `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad.is_some()
    }

    /// Accumulated gradient of a requires-grad leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self, vars: &[Var]) {
        for v in vars {
            if let Some(g) = self.nodes[v.0].grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    pub fn zero_all_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            grad: None,
            tracked,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Matrix product of `a: m×k` and `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::row_major(k),
            self.value(b).data(),
            Layout::row_major(n),
            0.0,
            &mut out,
        );
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Adds `bias: [F]` to every row of `x: [.., F]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let f = sb[0];
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(f) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 }).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Per-feature maximum over the point axis of `x: [B, N, F]`.
    ///
    /// The backward pass routes each feature's gradient to the first point
    /// attaining the maximum.
    pub fn max_pool_points(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::Shape {
                op: "max_pool_points",
                lhs: s.to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        let (b, n, f) = (s[0], s[1], s[2]);
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        let data = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; b * f];
        let mut argmax = vec![0usize; b * f];
        for bi in 0..b {
            let orow = &mut out[bi * f..(bi + 1) * f];
            let arow = &mut argmax[bi * f..(bi + 1) * f];
            for ni in 0..n {
                let xrow = &data[(bi * n + ni) * f..(bi * n + ni + 1) * f];
                for j in 0..f {
                    if xrow[j] > orow[j] || ni == 0 {
                        orow[j] = xrow[j];
                        arow[j] = ni;
                    }
                }
            }
        }
        let value = Tensor::new([b, f], out)?;
        Ok(self.push(value, Op::MaxPool { input: x, argmax }, &[x]))
    }

    /// `max_pool_points(x · weight)` without materializing the `[B, N, F]`
    /// product, for `x: [B, N, K]` and `weight: [K, F]`.
    ///
    /// Values and gradients equal the unfused composition; backward only
    /// touches the argmax rows, so it costs O(B·F·K) instead of O(B·N·F·K).
    pub fn linear_max_pool(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(weight));
        if sx.len() != 3 || sw.len() != 2 || sx[2] != sw[0] {
            return Err(self.shape_err("linear_max_pool", x, weight));
        }
        let (b, n, k, f) = (sx[0], sx[1], sx[2], sw[1]);
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        let xs = self.value(x).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; b * f];
        let mut argmax = vec![0u32; b * f];
        out.par_chunks_mut(f)
            .zip(argmax.par_chunks_mut(f))
            .enumerate()
            .for_each_init(
                || vec![0.0; n * f],
                |scratch, (bi, (orow, arow))| {
                    let cloud = &xs[bi * n * k..(bi + 1) * n * k];
                    gemm(
                        n,
                        k,
                        f,
                        cloud,
                        Layout::row_major(k),
                        w,
                        Layout::row_major(f),
                        0.0,
                        scratch,
                    );
                    orow.copy_from_slice(&scratch[..f]);
                    arow.fill(0);
                    for ni in 1..n {
                        let srow = &scratch[ni * f..(ni + 1) * f];
                        for j in 0..f {
                            if srow[j] > orow[j] {
                                orow[j] = srow[j];
                                arow[j] = ni as u32;
                            }
                        }
                    }
                },
            );
        let value = Tensor::new([b, f], out)?;
        Ok(self.push(
            value,
            Op::LinearMaxPool {
                input: x,
                weight,
                argmax,
            },
            &[x, weight],
        ))
    }

    fn rows_cols(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            });
        }
        if s[1] < 2 {
            return Err(Error::Contract(format!("{op} needs at least 2 classes")));
        }
        Ok((s[0], s[1]))
    }

    /// Row-wise log-softmax of `x: [B, C]`, stabilized by the row maximum.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x, "log_softmax")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax(x), &[x]))
    }

    /// Row-wise softmax of `x: [B, C]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x, "softmax")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Mean negative log-likelihood of `targets` under `log_probs: [B, C]`.
    pub fn nll_loss(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(log_probs);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape {
                op: "nll_loss",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index { index: bad, len: c });
        }
        let lp = self.value(log_probs).data();
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -lp[i * c + t])
            .sum();
        let value = Tensor::scalar(total / b as f64);
        Ok(self.push(
            value,
            Op::Nll {
                input: log_probs,
                targets: targets.to_vec(),
            },
            &[log_probs],
        ))
    }

    /// Mean cross-entropy between softmax(`logits`) and class `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        self.nll_loss(lp, targets)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Reverse pass from the scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(slot) = self.nodes[i].grad.as_mut() {
                    slot.iter_mut().zip(&g).for_each(|(s, d)| *s += d);
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        macro_rules! with_slot {
            ($v:expr, |$d:ident| $body:expr) => {
                if let Some($d) = slot(adj, nodes, $v) {
                    $body;
                }
            };
        }

        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                with_slot!(*a, |da| gemm(
                    m,
                    n,
                    k,
                    g,
                    Layout::row_major(n),
                    val(*b),
                    Layout::transposed(n),
                    1.0,
                    da
                ));
                with_slot!(*b, |db| gemm(
                    k,
                    m,
                    n,
                    val(*a),
                    Layout::transposed(k),
                    g,
                    Layout::row_major(n),
                    1.0,
                    db
                ));
            }
            Op::Add(a, b) => {
                with_slot!(*a, |da| axpy(da, g));
                with_slot!(*b, |db| axpy(db, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                with_slot!(*a, |da| da
                    .iter_mut()
                    .zip(g.iter().zip(vb))
                    .for_each(|(d, (gi, bi))| *d += gi * bi));
                with_slot!(*b, |db| db
                    .iter_mut()
                    .zip(g.iter().zip(va))
                    .for_each(|(d, (gi, ai))| *d += gi * ai));
            }
            Op::Scale(x, factor) => {
                with_slot!(*x, |dx| dx
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, gi)| *d += factor * gi));
            }
            Op::AddBias(x, bias) => {
                with_slot!(*x, |dx| axpy(dx, g));
                with_slot!(*bias, |db| {
                    let f = db.len();
                    for row in g.chunks_exact(f) {
                        axpy(db, row);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                with_slot!(*x, |dx| dx
                    .iter_mut()
                    .zip(g.iter().zip(vx))
                    .for_each(|(d, (gi, xi))| if *xi > 0.0 {
                        *d += gi
                    }));
            }
            Op::Reshape(x) => {
                with_slot!(*x, |dx| axpy(dx, g));
            }
            Op::MaxPool { input, argmax } => {
                let s = nodes[input.0].value.shape();
                let (n, f) = (s[1], s[2]);
                with_slot!(*input, |dx| {
                    for (idx, (&gi, &ni)) in g.iter().zip(argmax).enumerate() {
                        let (bi, j) = (idx / f, idx % f);
                        dx[(bi * n + ni) * f + j] += gi;
                    }
                });
            }
            Op::LinearMaxPool {
                input,
                weight,
                argmax,
            } => {
                let s = nodes[input.0].value.shape();
                let (n, k) = (s[1], s[2]);
                let f = nodes[weight.0].value.shape()[1];
                let (xs, w) = (val(*input), val(*weight));
                with_slot!(*input, |dx| {
                    for (idx, (&gi, &ni)) in g.iter().zip(argmax).enumerate() {
                        if gi == 0.0 {
                            continue;
                        }
                        let (bi, j) = (idx / f, idx % f);
                        let row = &mut dx[(bi * n + ni as usize) * k..][..k];
                        for (kk, r) in row.iter_mut().enumerate() {
                            *r += gi * w[kk * f + j];
                        }
                    }
                });
                with_slot!(*weight, |dw| {
                    for (idx, (&gi, &ni)) in g.iter().zip(argmax).enumerate() {
                        if gi == 0.0 {
                            continue;
                        }
                        let (bi, j) = (idx / f, idx % f);
                        let xrow = &xs[(bi * n + ni as usize) * k..][..k];
                        for (kk, xv) in xrow.iter().enumerate() {
                            dw[kk * f + j] += gi * xv;
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let out = nodes[i].value.data();
                let c = nodes[i].value.shape()[1];
                with_slot!(*x, |dx| {
                    for ((drow, grow), orow) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(out.chunks_exact(c))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            drow[j] += grow[j] - orow[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let out = nodes[i].value.data();
                let c = nodes[i].value.shape()[1];
                with_slot!(*x, |dx| {
                    for ((drow, grow), orow) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(out.chunks_exact(c))
                    {
                        let dot: f64 = grow.iter().zip(orow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            drow[j] += orow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Nll { input, targets } => {
                let c = nodes[input.0].value.shape()[1];
                let scale = g[0] / targets.len() as f64;
                with_slot!(*input, |dx| {
                    for (r, &t) in targets.iter().enumerate() {
                        dx[r * c + t] -= scale;
                    }
                });
            }
            Op::Sum(x) => {
                with_slot!(*x, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
        }
    }
}

/// Adjoint buffer for `v`, allocated on first use; `None` when no
/// requires-grad leaf sits behind `v`.
fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.tracked {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
