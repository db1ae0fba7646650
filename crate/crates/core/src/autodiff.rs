//! Reverse-mode differentiation over [`Tensor5`] values, with straight-through
//! estimator nodes for the quantizers, plus the Adam optimizer.
//!
//! Forward kernels are the ones used by [`crate::refnet`], so a tape forward in
//! evaluation mode computes bit-identical values to the reference path.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::quant::{clip, clip_ste_grad, heaviside, heaviside_ste_grad, sign_ste_grad, sign_strict, tern_code, tern_threshold, BNParams};
use crate::refnet::{self, sigmoid, vec_mat_acc, ConvSpec, NetError};
use crate::tensor::Tensor5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("trainable parameter {0} is not reachable from the loss")]
    DisconnectedGraph(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss([usize; 5]),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, spec: ConvSpec },
    Scale { x: Var, s: f64 },
    Div { x: Var, d: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Heaviside(Var),
    Clip(Var),
    Sign(Var),
    Tern(Var),
    Sigmoid(Var),
    Tanh(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    FixedNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelScale { x: Var, scales: Vec<f64> },
    MaxPool { x: Var, arg: Vec<usize> },
    SpatialSum(Var),
    Mux { i0: Var, i1: Var, select: Tensor5 },
    MatMul { x: Var, w: Var },
    SliceTime { x: Var, t: usize },
    StackTime(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    SumTime(Var),
    Sum(Var),
    AddBias { x: Var, b: Var },
    SoftmaxCce { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor5,
    op: Op,
    param: Option<String>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn add_into(dst: &mut Option<Tensor5>, g: Tensor5) {
    match dst {
        None => *dst = Some(g),
        Some(d) => {
            for (a, b) in d.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
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

    fn push(&mut self, value: Tensor5, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor5 {
        &self.nodes[v.0].value
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor5) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named trainable parameter.
    pub fn param(&mut self, name: &str, value: Tensor5) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: Some(name.to_string()),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        let y = refnet::conv3d(self.value(x), self.value(w), spec)?;
        Ok(self.push(y, Op::Conv { x, w, spec: *spec }, &[x, w]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).map(|v| v * s);
        self.push(y, Op::Scale { x, s }, &[x])
    }

    pub fn div(&mut self, x: Var, d: f64) -> Var {
        let y = self.value(x).map(|v| v / d);
        self.push(y, Op::Div { x, d }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q).map_err(NetError::from)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q).map_err(NetError::from)?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q).map_err(NetError::from)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x), &[x])
    }

    /// Heaviside forward, `1{|x| <= 1}` backward.
    pub fn heaviside(&mut self, x: Var) -> Var {
        let y = self.value(x).map(heaviside);
        self.push(y, Op::Heaviside(x), &[x])
    }

    /// Clip to `[-1, 1]` forward, identity backward.
    pub fn clip(&mut self, x: Var) -> Var {
        let y = self.value(x).map(clip);
        self.push(y, Op::Clip(x), &[x])
    }

    /// Strict sign forward, `1{|x| <= 1}` backward.
    pub fn sign(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sign_strict);
        self.push(y, Op::Sign(x), &[x])
    }

    /// Ternary codes with threshold `0.7 mean|w|` forward, `1{|w| <= 1}` backward.
    pub fn tern(&mut self, x: Var) -> Var {
        let delta = tern_threshold(self.value(x).data());
        let y = self.value(x).map(|v| tern_code(v, delta));
        self.push(y, Op::Tern(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        self.push(y, Op::Tanh(x), &[x])
    }

    /// Training-mode batch norm over all non-channel axes (biased variance).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let c = xv.shape()[4];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != c || b.len() != c {
            return Err(AutodiffError::Shape(format!("batch norm over {c} channels, params {}", g.len())));
        }
        let m = (xv.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for px in xv.data().chunks_exact(c) {
            for (a, &v) in mean.iter_mut().zip(px) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0; c];
        for px in xv.data().chunks_exact(c) {
            for ((a, &v), mu) in var.iter_mut().zip(px).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.data().to_vec();
        let mut y = xv.clone();
        for (i, (h, o)) in xhat.iter_mut().zip(y.data_mut()).enumerate() {
            let ci = i % c;
            *h = (*h - mean[ci]) * inv_std[ci];
            *o = g[ci] * *h + b[ci];
        }
        let stats = BatchStats { mean, var };
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Batch norm with fixed statistics; forward arithmetic is [`BNParams::apply`].
    pub fn fixed_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let p = BNParams {
            gamma: self.value(gamma).data().to_vec(),
            beta: self.value(beta).data().to_vec(),
            mean: mean.to_vec(),
            var: var.to_vec(),
            eps,
        };
        let c = self.value(x).shape()[4];
        if p.channels() != c || p.validate().is_err() {
            return Err(AutodiffError::Shape(format!("fixed norm over {c} channels")));
        }
        let y = crate::quant::bn_forward(self.value(x), &p);
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.push(
            y,
            Op::FixedNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Constant per-channel scale (bit-shift normalization).
    pub fn channel_scale(&mut self, x: Var, scales: Vec<f64>) -> Var {
        let c = scales.len();
        let mut y = self.value(x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v *= scales[i % c];
        }
        self.push(y, Op::ChannelScale { x, scales }, &[x])
    }

    pub fn maxpool(&mut self, x: Var, window: [usize; 3]) -> Result<Var> {
        let (y, arg) = refnet::maxpool3d_indices(self.value(x), window)?;
        Ok(self.push(y, Op::MaxPool { x, arg }, &[x]))
    }

    pub fn spatial_sum(&mut self, x: Var) -> Var {
        let y = refnet::spatial_sum(self.value(x));
        self.push(y, Op::SpatialSum(x), &[x])
    }

    /// MUX with a constant select (the select is not differentiated).
    pub fn mux(&mut self, i0: Var, i1: Var, select: Tensor5) -> Result<Var> {
        let y = refnet::mux(self.value(i0), self.value(i1), &select)?;
        Ok(self.push(y, Op::Mux { i0, i1, select }, &[i0, i1]))
    }

    /// Row-wise `x W` for `x (..., K)` and `W (1, 1, 1, K, M)`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let [_, _, _, k, m] = self.value(w).shape();
        if xs[4] != k {
            return Err(AutodiffError::Shape(format!("matmul {xs:?} by {k}x{m}")));
        }
        let mut y = Tensor5::zeros([xs[0], xs[1], xs[2], xs[3], m]);
        let wd = self.value(w).data();
        for (o, row) in y.data_mut().chunks_exact_mut(m).zip(self.value(x).data().chunks_exact(k)) {
            vec_mat_acc(row, wd, m, o);
        }
        Ok(self.push(y, Op::MatMul { x, w }, &[x, w]))
    }

    /// `(N, T, 1, 1, K)` -> time step `t` as `(N, 1, 1, 1, K)`.
    pub fn slice_time(&mut self, x: Var, t: usize) -> Var {
        let [n, tt, h, w, k] = self.value(x).shape();
        let per = h * w * k;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * per);
        for ni in 0..n {
            data.extend_from_slice(&src[(ni * tt + t) * per..(ni * tt + t + 1) * per]);
        }
        let y = Tensor5::new([n, 1, h, w, k], data).expect("slice shape");
        self.push(y, Op::SliceTime { x, t }, &[x])
    }

    /// Inverse of [`Self::slice_time`]: stacks `(N, 1, H, W, K)` steps along time.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let [n, _, h, w, k] = self.value(steps[0]).shape();
        let t = steps.len();
        let per = h * w * k;
        let mut data = vec![0.0; n * t * per];
        for (ti, s) in steps.iter().enumerate() {
            let v = self.value(*s);
            if v.shape() != [n, 1, h, w, k] {
                return Err(AutodiffError::Shape(format!("stack_time step {:?}", v.shape())));
            }
            for ni in 0..n {
                data[(ni * t + ti) * per..(ni * t + ti + 1) * per].copy_from_slice(&v.data()[ni * per..(ni + 1) * per]);
            }
        }
        let y = Tensor5::new([n, t, h, w, k], data).map_err(NetError::from)?;
        Ok(self.push(y, Op::StackTime(steps.to_vec()), steps))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.value(x).shape();
        let c = s[4];
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|px| px[start..start + len].iter().copied())
            .collect();
        let y = Tensor5::new([s[0], s[1], s[2], s[3], len], data).expect("slice shape");
        self.push(y, Op::SliceChannels { x, start }, &[x])
    }

    /// Sum over the time axis, in time order.
    pub fn sum_time(&mut self, x: Var) -> Var {
        let [n, t, h, w, k] = self.value(x).shape();
        let per = h * w * k;
        let src = self.value(x).data();
        let mut y = Tensor5::zeros([n, 1, h, w, k]);
        for ni in 0..n {
            let o = &mut y.data_mut()[ni * per..(ni + 1) * per];
            for ti in 0..t {
                for (a, b) in o.iter_mut().zip(&src[(ni * t + ti) * per..(ni * t + ti + 1) * per]) {
                    *a += b;
                }
            }
        }
        self.push(y, Op::SumTime(x), &[x])
    }

    /// Sum of every element, as a `[1; 5]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor5::filled([1; 5], self.value(x).data().iter().sum());
        self.push(y, Op::Sum(x), &[x])
    }

    /// Adds a per-channel bias `(1, 1, 1, 1, K)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let k = self.value(x).shape()[4];
        if self.value(b).len() != k {
            return Err(AutodiffError::Shape(format!("bias of {} for {k} channels", self.value(b).len())));
        }
        let bd = self.value(b).data().to_vec();
        let mut y = self.value(x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += bd[i % k];
        }
        Ok(self.push(y, Op::AddBias { x, b }, &[x, b]))
    }

    /// Mean categorical cross-entropy of `softmax(logits)` over the batch.
    pub fn softmax_cce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape();
        let k = s[4];
        let n = self.value(logits).len() / k;
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(AutodiffError::Shape(format!("{} labels for {n} rows of {k} classes", labels.len())));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).data().chunks_exact(k).zip(labels) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            loss += z.ln() + mx - row[label];
            probs.extend(row.iter().map(|v| (v - mx).exp() / z));
        }
        let y = Tensor5::filled([1; 5], loss / n as f64);
        Ok(self.push(
            y,
            Op::SoftmaxCce {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Gradients of a scalar `loss` with respect to every named parameter.
    /// Fails if one of `trainable` received no gradient.
    pub fn backward(&self, loss: Var, trainable: &[String]) -> Result<BTreeMap<String, Tensor5>> {
        let ls = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Tensor5>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor5::filled(ls, 1.0));
        let mut out = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.param {
                        let entry: &mut Option<Tensor5> = out.entry(name.clone()).or_insert(None);
                        add_into(entry, g);
                    }
                }
                Op::Conv { x, w, spec } => {
                    let (dx, dw) = refnet::conv3d_backward(self.value(*x), self.value(*w), &g, spec, needs(*x))?;
                    if let Some(dx) = dx {
                        add_into(&mut grads[x.0], dx);
                    }
                    if needs(*w) {
                        add_into(&mut grads[w.0], dw);
                    }
                }
                Op::Scale { x, s } => add_into(&mut grads[x.0], g.map(|v| v * s)),
                Op::Div { x, d } => add_into(&mut grads[x.0], g.map(|v| v / d)),
                Op::Add(a, b) => {
                    if needs(*b) {
                        add_into(&mut grads[b.0], g.clone());
                    }
                    add_into(&mut grads[a.0], g);
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        add_into(&mut grads[b.0], g.map(|v| -v));
                    }
                    add_into(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if needs(*a) {
                        add_into(&mut grads[a.0], g.zip_map(bv, |p, q| p * q).map_err(NetError::from)?);
                    }
                    if needs(*b) {
                        add_into(&mut grads[b.0], g.zip_map(av, |p, q| p * q).map_err(NetError::from)?);
                    }
                }
                Op::Relu(x) => {
                    let d = g.zip_map(self.value(*x), |p, v| if v > 0.0 { p } else { 0.0 }).map_err(NetError::from)?;
                    add_into(&mut grads[x.0], d);
                }
                Op::Heaviside(x) => {
                    let d = g.zip_map(self.value(*x), |p, v| p * heaviside_ste_grad(v)).map_err(NetError::from)?;
                    add_into(&mut grads[x.0], d);
                }
                Op::Clip(x) => {
                    let d = g.zip_map(self.value(*x), |p, v| p * clip_ste_grad(v)).map_err(NetError::from)?;
                    add_into(&mut grads[x.0], d);
                }
                Op::Sign(x) | Op::Tern(x) => {
                    let d = g.zip_map(self.value(*x), |p, v| p * sign_ste_grad(v)).map_err(NetError::from)?;
                    add_into(&mut grads[x.0], d);
                }
                Op::Sigmoid(x) => {
                    let d = g.zip_map(&node.value, |p, y| p * y * (1.0 - y)).map_err(NetError::from)?;
                    add_into(&mut grads[x.0], d);
                }
                Op::Tanh(x) => {
                    let d = g.zip_map(&node.value, |p, y| p * (1.0 - y * y)).map_err(NetError::from)?;
                    add_into(&mut grads[x.0], d);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = inv_std.len();
                    let m = (g.len() / c) as f64;
                    let gm = self.value(*gamma).data();
                    let mut dbeta = vec![0.0; c];
                    let mut dgamma = vec![0.0; c];
                    for (i, &gv) in g.data().iter().enumerate() {
                        dbeta[i % c] += gv;
                        dgamma[i % c] += gv * xhat[i];
                    }
                    if needs(*x) {
                        let mut dx = g.clone();
                        for (i, v) in dx.data_mut().iter_mut().enumerate() {
                            let ci = i % c;
                            *v = gm[ci] * inv_std[ci] / m * (m * *v - dbeta[ci] - xhat[i] * dgamma[ci]);
                        }
                        add_into(&mut grads[x.0], dx);
                    }
                    add_into(&mut grads[gamma.0], Tensor5::new([1, 1, 1, 1, c], dgamma).map_err(NetError::from)?);
                    add_into(&mut grads[beta.0], Tensor5::new([1, 1, 1, 1, c], dbeta).map_err(NetError::from)?);
                }
                Op::FixedNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let c = inv_std.len();
                    let gm = self.value(*gamma).data();
                    let xv = self.value(*x).data();
                    let mut dbeta = vec![0.0; c];
                    let mut dgamma = vec![0.0; c];
                    for (i, &gv) in g.data().iter().enumerate() {
                        let ci = i % c;
                        dbeta[ci] += gv;
                        dgamma[ci] += gv * (xv[i] - mean[ci]) * inv_std[ci];
                    }
                    if needs(*x) {
                        let mut dx = g.clone();
                        for (i, v) in dx.data_mut().iter_mut().enumerate() {
                            *v *= gm[i % c] * inv_std[i % c];
                        }
                        add_into(&mut grads[x.0], dx);
                    }
                    add_into(&mut grads[gamma.0], Tensor5::new([1, 1, 1, 1, c], dgamma).map_err(NetError::from)?);
                    add_into(&mut grads[beta.0], Tensor5::new([1, 1, 1, 1, c], dbeta).map_err(NetError::from)?);
                }
                Op::ChannelScale { x, scales } => {
                    let c = scales.len();
                    let mut d = g;
                    for (i, v) in d.data_mut().iter_mut().enumerate() {
                        *v *= scales[i % c];
                    }
                    add_into(&mut grads[x.0], d);
                }
                Op::MaxPool { x, arg } => {
                    let mut d = Tensor5::zeros(self.value(*x).shape());
                    for (&a, &gv) in arg.iter().zip(g.data()) {
                        d.data_mut()[a] += gv;
                    }
                    add_into(&mut grads[x.0], d);
                }
                Op::SpatialSum(x) => {
                    let [n, t, h, w, c] = self.value(*x).shape();
                    let mut d = Tensor5::zeros([n, t, h, w, c]);
                    for (frame, chunk) in d.data_mut().chunks_exact_mut(h * w * c).enumerate() {
                        let gr = &g.data()[frame * c..(frame + 1) * c];
                        for px in chunk.chunks_exact_mut(c) {
                            px.copy_from_slice(gr);
                        }
                    }
                    add_into(&mut grads[x.0], d);
                }
                Op::Mux { i0, i1, select } => {
                    let one = Tensor5::filled(select.shape(), 1.0);
                    let inv = select.zip_map(&one, |s, o| o - s).map_err(NetError::from)?;
                    if needs(*i1) {
                        add_into(&mut grads[i1.0], refnet::mux(&Tensor5::zeros(g.shape()), &g, select)?);
                    }
                    if needs(*i0) {
                        // the gradient reaching I0 is g where S = 0
                        add_into(&mut grads[i0.0], refnet::mux(&Tensor5::zeros(g.shape()), &g, &inv)?);
                    }
                }
                Op::MatMul { x, w } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let [_, _, _, k, m] = wv.shape();
                    if needs(*x) {
                        let mut dx = Tensor5::zeros(xv.shape());
                        for (d, gr) in dx.data_mut().chunks_exact_mut(k).zip(g.data().chunks_exact(m)) {
                            for (j, dj) in d.iter_mut().enumerate() {
                                *dj = refnet::dot(gr, &wv.data()[j * m..(j + 1) * m]);
                            }
                        }
                        add_into(&mut grads[x.0], dx);
                    }
                    if needs(*w) {
                        let mut dw = Tensor5::zeros(wv.shape());
                        for (row, gr) in xv.data().chunks_exact(k).zip(g.data().chunks_exact(m)) {
                            vec_outer_acc(row, gr, dw.data_mut());
                        }
                        add_into(&mut grads[w.0], dw);
                    }
                }
                Op::SliceTime { x, t } => {
                    let [n, tt, h, w, k] = self.value(*x).shape();
                    let per = h * w * k;
                    let mut d = Tensor5::zeros([n, tt, h, w, k]);
                    for ni in 0..n {
                        d.data_mut()[(ni * tt + t) * per..(ni * tt + t + 1) * per]
                            .copy_from_slice(&g.data()[ni * per..(ni + 1) * per]);
                    }
                    add_into(&mut grads[x.0], d);
                }
                Op::StackTime(steps) => {
                    let [n, t, h, w, k] = g.shape();
                    let per = h * w * k;
                    for (ti, s) in steps.iter().enumerate() {
                        if !needs(*s) {
                            continue;
                        }
                        let mut data = Vec::with_capacity(n * per);
                        for ni in 0..n {
                            data.extend_from_slice(&g.data()[(ni * t + ti) * per..(ni * t + ti + 1) * per]);
                        }
                        add_into(&mut grads[s.0], Tensor5::new([n, 1, h, w, k], data).map_err(NetError::from)?);
                    }
                }
                Op::SliceChannels { x, start } => {
                    let xs = self.value(*x).shape();
                    let (c, len) = (xs[4], g.shape()[4]);
                    let mut d = Tensor5::zeros(xs);
                    for (dst, src) in d.data_mut().chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                        dst[*start..start + len].copy_from_slice(src);
                    }
                    add_into(&mut grads[x.0], d);
                }
                Op::SumTime(x) => {
                    let [n, t, h, w, k] = self.value(*x).shape();
                    let per = h * w * k;
                    let mut d = Tensor5::zeros([n, t, h, w, k]);
                    for ni in 0..n {
                        for ti in 0..t {
                            d.data_mut()[(ni * t + ti) * per..(ni * t + ti + 1) * per]
                                .copy_from_slice(&g.data()[ni * per..(ni + 1) * per]);
                        }
                    }
                    add_into(&mut grads[x.0], d);
                }
                Op::Sum(x) => {
                    add_into(&mut grads[x.0], Tensor5::filled(self.value(*x).shape(), g.data()[0]));
                }
                Op::AddBias { x, b } => {
                    let k = self.value(*b).len();
                    if needs(*b) {
                        let mut db = vec![0.0; k];
                        for (i, v) in g.data().iter().enumerate() {
                            db[i % k] += v;
                        }
                        add_into(&mut grads[b.0], Tensor5::new(self.value(*b).shape(), db).map_err(NetError::from)?);
                    }
                    add_into(&mut grads[x.0], g);
                }
                Op::SoftmaxCce { logits, probs, labels } => {
                    let s = self.value(*logits).shape();
                    let k = s[4];
                    let n = labels.len() as f64;
                    let up = g.data()[0];
                    let mut d = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * k + l] -= 1.0;
                    }
                    d.iter_mut().for_each(|v| *v *= up / n);
                    add_into(&mut grads[logits.0], Tensor5::new(s, d).map_err(NetError::from)?);
                }
            }
        }
        let mut result = BTreeMap::new();
        for name in trainable {
            match out.remove(name).flatten() {
                Some(g) => {
                    result.insert(name.clone(), g);
                }
                None => return Err(AutodiffError::DisconnectedGraph(name.clone())),
            }
        }
        Ok(result)
    }
}

/// `W += x^T g` for a row `x (K)` and row gradient `g (M)`.
fn vec_outer_acc(x: &[f64], g: &[f64], w: &mut [f64]) {
    let m = g.len();
    for (j, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (a, &b) in w[j * m..(j + 1) * m].iter_mut().zip(g) {
            *a += xv * b;
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor5>, grads: &BTreeMap<String, Tensor5>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
