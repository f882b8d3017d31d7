//! Reverse-mode automatic differentiation over a linear tape, plus a
//! non-recording evaluation engine sharing the same forward kernels.
//!
//! Everything that must be differentiated (network layers, RK4 stages,
//! losses) is written once against [`Engine`]; running it on a [`Tape`]
//! records the graph, running it on [`EvalEngine`] just computes values.
//! Both paths call the same kernels in the same order, so forward values
//! agree bit-for-bit.

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Abstract forward-evaluation context.
///
/// `Val` is a handle to a tensor value: a node index on the tape, or the
/// tensor itself in plain evaluation.
pub trait Engine {
    type Val: Clone;

    /// Non-trainable input.
    fn constant(&mut self, t: Tensor) -> Self::Val;
    /// Trainable leaf; the tape registers it for gradient output.
    fn param(&mut self, t: Tensor) -> Self::Val;
    fn value<'a>(&'a self, v: &'a Self::Val) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    fn sub(&mut self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    fn mul(&mut self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    fn scale(&mut self, a: &Self::Val, c: f64) -> Self::Val;
    /// `[m,n] + [n]`, bias broadcast over rows.
    fn add_bias(&mut self, x: &Self::Val, b: &Self::Val) -> Self::Val;
    fn tanh(&mut self, x: &Self::Val) -> Self::Val;
    fn relu(&mut self, x: &Self::Val) -> Self::Val;
    fn softplus(&mut self, x: &Self::Val) -> Self::Val;
    fn sin(&mut self, x: &Self::Val) -> Self::Val;
    fn cos(&mut self, x: &Self::Val) -> Self::Val;
    /// Normalize each row over the trailing dimension.
    fn layer_norm(&mut self, x: &Self::Val, gamma: &Self::Val, beta: &Self::Val) -> Self::Val;
    /// Batch statistics over rows; returns (output, batch_mean, batch_var).
    fn batch_norm_train(
        &mut self,
        x: &Self::Val,
        gamma: &Self::Val,
        beta: &Self::Val,
    ) -> (Self::Val, Tensor, Tensor);
    /// Normalization with fixed (running) statistics.
    fn batch_norm_infer(
        &mut self,
        x: &Self::Val,
        gamma: &Self::Val,
        beta: &Self::Val,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Self::Val;
    /// Extract column `j` of `[m,n]` as `[m]`.
    fn col(&mut self, x: &Self::Val, j: usize) -> Self::Val;
    /// Stack `[m]` vectors into `[m, len]`.
    fn stack_cols(&mut self, xs: &[Self::Val]) -> Self::Val;
    fn sum_all(&mut self, x: &Self::Val) -> Self::Val;
    fn mean_all(&mut self, x: &Self::Val) -> Self::Val;
}

// ── shared forward kernels ──────────────────────────────────────────

fn k_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dims: {:?} x {:?}", a.shape(), b.shape());
    let mut out = Tensor::zeros(vec![m, n]);
    matmul_acc(out.data_mut(), a.data(), b.data(), m, k, n);
    out
}

fn k_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn k_map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn k_add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let n = b.numel();
    assert_eq!(x.cols(), n, "add_bias width");
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        for (v, &bv) in row.iter_mut().zip(b.data().iter()) {
            *v += bv;
        }
    }
    out
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|.
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

/// Returns (normalized output, per-row (mean, inv_std)).
fn k_layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, Vec<(f64, f64)>) {
    let n = x.cols();
    assert_eq!(gamma.numel(), n);
    assert_eq!(beta.numel(), n);
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut stats = Vec::with_capacity(x.rows());
    for (row_in, row_out) in x
        .data()
        .chunks_exact(n)
        .zip(out.data_mut().chunks_exact_mut(n))
    {
        let mean = row_in.iter().sum::<f64>() / n as f64;
        let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((o, &v), (&g, &b)) in row_out
            .iter_mut()
            .zip(row_in.iter())
            .zip(gamma.data().iter().zip(beta.data().iter()))
        {
            *o = (v - mean) * inv_std * g + b;
        }
        stats.push((mean, inv_std));
    }
    (out, stats)
}

/// Returns (output, per-feature mean, per-feature biased var, per-feature inv_std).
fn k_batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = x.rows();
    let n = x.cols();
    assert!(m > 0, "batch_norm on empty batch");
    let mut mean = vec![0.0; n];
    for row in x.data().chunks_exact(n) {
        for (s, &v) in mean.iter_mut().zip(row.iter()) {
            *s += v;
        }
    }
    for s in mean.iter_mut() {
        *s /= m as f64;
    }
    let mut var = vec![0.0; n];
    for row in x.data().chunks_exact(n) {
        for ((s, &v), &mu) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
            *s += (v - mu) * (v - mu);
        }
    }
    for s in var.iter_mut() {
        *s /= m as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for (row_in, row_out) in x
        .data()
        .chunks_exact(n)
        .zip(out.data_mut().chunks_exact_mut(n))
    {
        for (j, (o, &v)) in row_out.iter_mut().zip(row_in.iter()).enumerate() {
            *o = (v - mean[j]) * inv_std[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    (out, mean, var, inv_std)
}

fn k_batch_norm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> (Tensor, Vec<f64>) {
    let n = x.cols();
    let inv_std: Vec<f64> = running_var
        .data()
        .iter()
        .map(|&v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
        .collect();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for (row_in, row_out) in x
        .data()
        .chunks_exact(n)
        .zip(out.data_mut().chunks_exact_mut(n))
    {
        for (j, (o, &v)) in row_out.iter_mut().zip(row_in.iter()).enumerate() {
            *o = (v - running_mean.data()[j]) * inv_std[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    (out, inv_std)
}

fn k_col(x: &Tensor, j: usize) -> Tensor {
    let n = x.cols();
    assert!(j < n, "col {} of width {}", j, n);
    let data = x.data().chunks_exact(n).map(|row| row[j]).collect();
    Tensor::vector(data)
}

fn k_stack_cols(xs: &[&Tensor]) -> Tensor {
    let m = xs[0].numel();
    let n = xs.len();
    for x in xs {
        assert_eq!(x.numel(), m, "stack_cols length mismatch");
    }
    let mut out = Tensor::zeros(vec![m, n]);
    for (j, x) in xs.iter().enumerate() {
        for (i, &v) in x.data().iter().enumerate() {
            out.data_mut()[i * n + j] = v;
        }
    }
    out
}

// ── plain evaluation ────────────────────────────────────────────────

/// Computes values without recording; used for data generation, rollout
/// evaluation, and frozen-model inference.
#[derive(Default)]
pub struct EvalEngine;

impl EvalEngine {
    pub fn new() -> Self {
        EvalEngine
    }
}

impl Engine for EvalEngine {
    type Val = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn param(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        k_matmul(a, b)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        k_zip(a, b, |x, y| x + y)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        k_zip(a, b, |x, y| x - y)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        k_zip(a, b, |x, y| x * y)
    }
    fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        k_map(a, |x| x * c)
    }
    fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Tensor {
        k_add_bias(x, b)
    }
    fn tanh(&mut self, x: &Tensor) -> Tensor {
        k_map(x, f64::tanh)
    }
    fn relu(&mut self, x: &Tensor) -> Tensor {
        k_map(x, |v| if v > 0.0 { v } else { 0.0 })
    }
    fn softplus(&mut self, x: &Tensor) -> Tensor {
        k_map(x, softplus_scalar)
    }
    fn sin(&mut self, x: &Tensor) -> Tensor {
        k_map(x, f64::sin)
    }
    fn cos(&mut self, x: &Tensor) -> Tensor {
        k_map(x, f64::cos)
    }
    fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
        k_layer_norm(x, gamma, beta).0
    }
    fn batch_norm_train(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let (out, mean, var, _) = k_batch_norm_train(x, gamma, beta);
        (out, Tensor::vector(mean), Tensor::vector(var))
    }
    fn batch_norm_infer(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Tensor {
        k_batch_norm_infer(x, gamma, beta, running_mean, running_var).0
    }
    fn col(&mut self, x: &Tensor, j: usize) -> Tensor {
        k_col(x, j)
    }
    fn stack_cols(&mut self, xs: &[Tensor]) -> Tensor {
        let refs: Vec<&Tensor> = xs.iter().collect();
        k_stack_cols(&refs)
    }
    fn sum_all(&mut self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.data().iter().sum())
    }
    fn mean_all(&mut self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
    }
}

// ── tape ────────────────────────────────────────────────────────────

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Sin(usize),
    Cos(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: Vec<(f64, f64)>,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormInfer {
        x: usize,
        gamma: usize,
        beta: usize,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
    },
    Col(usize, usize),
    StackCols(Vec<usize>),
    SumAll(usize),
    MeanAll(usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Records primitive operations during a forward pass; `backward` replays
/// them in reverse, visiting each node exactly once.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    /// Reverse pass from a scalar loss node. Returns one gradient tensor per
    /// registered parameter, in registration order; parameters the loss does
    /// not depend on get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Vec<Tensor>> {
        let lt = self.val(loss.0);
        if lt.numel() != 1 {
            return Err(Error::Shape {
                context: "backward loss must be scalar",
                expected: vec![1],
                got: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            // Re-store for parameter collection.
            grads[id] = Some(g);
        }

        let out = self
            .params
            .iter()
            .map(|&pid| {
                let shape = self.val(pid).shape().to_vec();
                match &grads[pid] {
                    Some(g) => Tensor::new(shape, g.clone()),
                    None => Tensor::zeros(shape),
                }
            })
            .collect();
        Ok(out)
    }

    fn add_into(grads: &mut Vec<Option<Vec<f64>>>, id: usize, numel: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }

    fn accumulate(&self, id: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                Self::add_into(grads, *a, m * k, |da| {
                    matmul_a_bt_acc(da, g, bv.data(), m, n, k);
                });
                Self::add_into(grads, *b, k * n, |db| {
                    matmul_at_b_acc(db, av.data(), g, k, m, n);
                });
            }
            Op::Add(a, b) => {
                Self::add_into(grads, *a, g.len(), |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                Self::add_into(grads, *b, g.len(), |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                Self::add_into(grads, *a, g.len(), |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                Self::add_into(grads, *b, g.len(), |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                Self::add_into(grads, *a, g.len(), |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * x;
                    }
                });
                Self::add_into(grads, *b, g.len(), |db| {
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                Self::add_into(grads, *a, g.len(), |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                });
            }
            Op::AddBias(x, b) => {
                let n = self.val(*b).numel();
                Self::add_into(grads, *x, g.len(), |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                Self::add_into(grads, *b, n, |db| {
                    for row in g.chunks_exact(n) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = self.nodes[id].value.data();
                Self::add_into(grads, *x, g.len(), |dx| {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.val(*x).data();
                Self::add_into(grads, *x, g.len(), |dx| {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = self.val(*x).data();
                Self::add_into(grads, *x, g.len(), |dx| {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * sigmoid(v);
                    }
                });
            }
            Op::Sin(x) => {
                let xv = self.val(*x).data();
                Self::add_into(grads, *x, g.len(), |dx| {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * v.cos();
                    }
                });
            }
            Op::Cos(x) => {
                let xv = self.val(*x).data();
                Self::add_into(grads, *x, g.len(), |dx| {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d -= gv * v.sin();
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xv = self.val(*x);
                let n = xv.cols();
                let gv = self.val(*gamma).data();
                let inv_n = 1.0 / n as f64;
                // dγ, dβ
                Self::add_into(grads, *gamma, n, |dg| {
                    for (row_g, (row_x, &(mean, inv_std))) in g
                        .chunks_exact(n)
                        .zip(xv.data().chunks_exact(n).zip(stats.iter()))
                    {
                        for ((d, &gg), &vx) in dg.iter_mut().zip(row_g).zip(row_x) {
                            *d += gg * (vx - mean) * inv_std;
                        }
                    }
                });
                Self::add_into(grads, *beta, n, |db| {
                    for row_g in g.chunks_exact(n) {
                        for (d, &gg) in db.iter_mut().zip(row_g) {
                            *d += gg;
                        }
                    }
                });
                Self::add_into(grads, *x, xv.numel(), |dx| {
                    for ((row_dx, row_g), (row_x, &(mean, inv_std))) in dx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xv.data().chunks_exact(n).zip(stats.iter()))
                    {
                        let mut sum_gg = 0.0;
                        let mut sum_gg_xhat = 0.0;
                        for ((&gg, &vx), &gam) in row_g.iter().zip(row_x).zip(gv) {
                            let xhat = (vx - mean) * inv_std;
                            let ggg = gg * gam;
                            sum_gg += ggg;
                            sum_gg_xhat += ggg * xhat;
                        }
                        let mean_gg = sum_gg * inv_n;
                        let mean_gg_xhat = sum_gg_xhat * inv_n;
                        for ((d, (&gg, &vx)), &gam) in row_dx
                            .iter_mut()
                            .zip(row_g.iter().zip(row_x))
                            .zip(gv)
                        {
                            let xhat = (vx - mean) * inv_std;
                            *d += (gg * gam - mean_gg - xhat * mean_gg_xhat) * inv_std;
                        }
                    }
                });
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.val(*x);
                let m = xv.rows();
                let n = xv.cols();
                let gv = self.val(*gamma).data();
                let inv_m = 1.0 / m as f64;
                Self::add_into(grads, *gamma, n, |dg| {
                    for (row_g, row_x) in g.chunks_exact(n).zip(xv.data().chunks_exact(n)) {
                        for (j, (d, &gg)) in dg.iter_mut().zip(row_g).enumerate() {
                            *d += gg * (row_x[j] - mean[j]) * inv_std[j];
                        }
                    }
                });
                Self::add_into(grads, *beta, n, |db| {
                    for row_g in g.chunks_exact(n) {
                        for (d, &gg) in db.iter_mut().zip(row_g) {
                            *d += gg;
                        }
                    }
                });
                // Column sums needed for the batch-statistics backward.
                let mut sum_g = vec![0.0; n];
                let mut sum_g_xhat = vec![0.0; n];
                for (row_g, row_x) in g.chunks_exact(n).zip(xv.data().chunks_exact(n)) {
                    for j in 0..n {
                        let xhat = (row_x[j] - mean[j]) * inv_std[j];
                        sum_g[j] += row_g[j];
                        sum_g_xhat[j] += row_g[j] * xhat;
                    }
                }
                Self::add_into(grads, *x, xv.numel(), |dx| {
                    for (row_dx, (row_g, row_x)) in dx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n).zip(xv.data().chunks_exact(n)))
                    {
                        for j in 0..n {
                            let xhat = (row_x[j] - mean[j]) * inv_std[j];
                            let term =
                                row_g[j] - sum_g[j] * inv_m - xhat * sum_g_xhat[j] * inv_m;
                            row_dx[j] += term * gv[j] * inv_std[j];
                        }
                    }
                });
            }
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                inv_std,
                mean,
            } => {
                let xv = self.val(*x);
                let n = xv.cols();
                let gv = self.val(*gamma).data();
                Self::add_into(grads, *gamma, n, |dg| {
                    for (row_g, row_x) in g.chunks_exact(n).zip(xv.data().chunks_exact(n)) {
                        for (j, (d, &gg)) in dg.iter_mut().zip(row_g).enumerate() {
                            *d += gg * (row_x[j] - mean[j]) * inv_std[j];
                        }
                    }
                });
                Self::add_into(grads, *beta, n, |db| {
                    for row_g in g.chunks_exact(n) {
                        for (d, &gg) in db.iter_mut().zip(row_g) {
                            *d += gg;
                        }
                    }
                });
                Self::add_into(grads, *x, xv.numel(), |dx| {
                    for (row_dx, row_g) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for j in 0..n {
                            row_dx[j] += row_g[j] * gv[j] * inv_std[j];
                        }
                    }
                });
            }
            Op::Col(x, j) => {
                let n = self.val(*x).cols();
                let numel = self.val(*x).numel();
                let j = *j;
                Self::add_into(grads, *x, numel, |dx| {
                    for (i, &gv) in g.iter().enumerate() {
                        dx[i * n + j] += gv;
                    }
                });
            }
            Op::StackCols(xs) => {
                let n = xs.len();
                for (j, &xid) in xs.iter().enumerate() {
                    let m = self.val(xid).numel();
                    Self::add_into(grads, xid, m, |dx| {
                        for (i, d) in dx.iter_mut().enumerate() {
                            *d += g[i * n + j];
                        }
                    });
                }
            }
            Op::SumAll(x) => {
                let numel = self.val(*x).numel();
                let gv = g[0];
                Self::add_into(grads, *x, numel, |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let numel = self.val(*x).numel();
                let gv = g[0] / numel as f64;
                Self::add_into(grads, *x, numel, |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
        }
    }
}

impl Engine for Tape {
    type Val = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }
    fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(Op::Leaf, t);
        self.params.push(v.0);
        v
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(v.0)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let out = k_matmul(self.val(a.0), self.val(b.0));
        self.push(Op::MatMul(a.0, b.0), out)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let out = k_zip(self.val(a.0), self.val(b.0), |x, y| x + y);
        self.push(Op::Add(a.0, b.0), out)
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let out = k_zip(self.val(a.0), self.val(b.0), |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), out)
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let out = k_zip(self.val(a.0), self.val(b.0), |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), out)
    }
    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let out = k_map(self.val(a.0), |x| x * c);
        self.push(Op::Scale(a.0, c), out)
    }
    fn add_bias(&mut self, x: &Var, b: &Var) -> Var {
        let out = k_add_bias(self.val(x.0), self.val(b.0));
        self.push(Op::AddBias(x.0, b.0), out)
    }
    fn tanh(&mut self, x: &Var) -> Var {
        let out = k_map(self.val(x.0), f64::tanh);
        self.push(Op::Tanh(x.0), out)
    }
    fn relu(&mut self, x: &Var) -> Var {
        let out = k_map(self.val(x.0), |v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x.0), out)
    }
    fn softplus(&mut self, x: &Var) -> Var {
        let out = k_map(self.val(x.0), softplus_scalar);
        self.push(Op::Softplus(x.0), out)
    }
    fn sin(&mut self, x: &Var) -> Var {
        let out = k_map(self.val(x.0), f64::sin);
        self.push(Op::Sin(x.0), out)
    }
    fn cos(&mut self, x: &Var) -> Var {
        let out = k_map(self.val(x.0), f64::cos);
        self.push(Op::Cos(x.0), out)
    }
    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var) -> Var {
        let (out, stats) = k_layer_norm(self.val(x.0), self.val(gamma.0), self.val(beta.0));
        self.push(
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                stats,
            },
            out,
        )
    }
    fn batch_norm_train(&mut self, x: &Var, gamma: &Var, beta: &Var) -> (Var, Tensor, Tensor) {
        let (out, mean, var, inv_std) =
            k_batch_norm_train(self.val(x.0), self.val(gamma.0), self.val(beta.0));
        let v = self.push(
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: mean.clone(),
                inv_std,
            },
            out,
        );
        (v, Tensor::vector(mean), Tensor::vector(var))
    }
    fn batch_norm_infer(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Var {
        let (out, inv_std) = k_batch_norm_infer(
            self.val(x.0),
            self.val(gamma.0),
            self.val(beta.0),
            running_mean,
            running_var,
        );
        self.push(
            Op::BatchNormInfer {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                inv_std,
                mean: running_mean.data().to_vec(),
            },
            out,
        )
    }
    fn col(&mut self, x: &Var, j: usize) -> Var {
        let out = k_col(self.val(x.0), j);
        self.push(Op::Col(x.0, j), out)
    }
    fn stack_cols(&mut self, xs: &[Var]) -> Var {
        let refs: Vec<&Tensor> = xs.iter().map(|v| self.val(v.0)).collect();
        let out = k_stack_cols(&refs);
        self.push(Op::StackCols(xs.iter().map(|v| v.0).collect()), out)
    }
    fn sum_all(&mut self, x: &Var) -> Var {
        let out = Tensor::scalar(self.val(x.0).data().iter().sum());
        self.push(Op::SumAll(x.0), out)
    }
    fn mean_all(&mut self, x: &Var) -> Var {
        let v = self.val(x.0);
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64);
        self.push(Op::MeanAll(x.0), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        // loss = w * x with w = 3, x = 2 -> dloss/dw = 2
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let x = tape.constant(Tensor::scalar(2.0));
        let loss = tape.mul(&w, &x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[0].item(), 2.0);
    }

    #[test]
    fn tanh_at_zero() {
        // loss = tanh(w) at w = 0 -> dloss/dw = 1
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(0.0));
        let loss = tape.tanh(&w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[0].item(), 1.0);
    }

    #[test]
    fn disconnected_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let unused = tape.param(Tensor::matrix(2, 2, vec![1.0; 4]));
        let loss = tape.mul(&w, &w);
        let _ = unused;
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[0].item(), 6.0);
        assert_eq!(grads[1].data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn matmul_gradients() {
        // loss = sum(A @ B); dA = row sums of B^T broadcast, dB likewise.
        let mut tape = Tape::new();
        let a = tape.param(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.param(Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]));
        let c = tape.matmul(&a, &b);
        let loss = tape.sum_all(&c);
        let grads = tape.backward(loss).unwrap();
        // dA[i,k] = sum_j B[k,j]
        let expect_da = [-0.5, 2.0, 4.0, -0.5, 2.0, 4.0];
        for (g, e) in grads[0].data().iter().zip(expect_da.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
        // dB[k,j] = sum_i A[i,k]
        let expect_db = [5.0, 5.0, 7.0, 7.0, 9.0, 9.0];
        for (g, e) in grads[1].data().iter().zip(expect_db.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_and_tape_forward_agree_bitwise() {
        let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64) * 0.37 - 1.1).collect());
        let gamma = Tensor::vector(vec![1.1, 0.9, 1.0, 1.3]);
        let beta = Tensor::vector(vec![0.1, -0.2, 0.0, 0.05]);

        let mut ev = EvalEngine::new();
        let (xe, ge, be) = (
            ev.constant(x.clone()),
            ev.constant(gamma.clone()),
            ev.constant(beta.clone()),
        );
        let ln_e = ev.layer_norm(&xe, &ge, &be);
        let t_e = ev.tanh(&ln_e);
        let s_e = ev.sum_all(&t_e);

        let mut tape = Tape::new();
        let (xt, gt, bt) = (
            tape.constant(x),
            tape.constant(gamma),
            tape.constant(beta),
        );
        let ln_t = tape.layer_norm(&xt, &gt, &bt);
        let t_t = tape.tanh(&ln_t);
        let s_t = tape.sum_all(&t_t);

        assert_eq!(ev.value(&s_e).data(), tape.value(&s_t).data());
        assert_eq!(ev.value(&ln_e).data(), tape.value(&ln_t).data());
    }
}
