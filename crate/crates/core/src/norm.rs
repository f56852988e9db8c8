//! Parametric normalization and the two batch-statistics schemes it replaces.
//!
//! Parametric normalization (PN) centres each channel on a learnable offset
//! `α` and divides by the root mean square of the centred values:
//!
//! ```text
//! x̂ = (x − α) / (RMS(x − α) + ε)
//! y = γ·x̂ + β
//! ```
//!
//! During training the RMS is taken over batch and spatial positions. At
//! evaluation it is taken over the spatial positions of each sample alone, so
//! a prediction never depends on which other queries share its batch and the
//! layer accumulates no statistics of any kind.
//!
//! Static batch normalization (sBN) normalizes every batch by its own mean
//! and variance in both phases. Standard batch normalization keeps running
//! statistics and is provided for comparison only.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    #[serde(alias = "parametric")]
    Pn,
    #[serde(alias = "static")]
    Sbn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Values saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    /// One entry per reduction group: RMS for PN, inverse std for sBN.
    stat: Vec<T>,
    per_sample: bool,
}

fn channel_params<'a, T: Scalar>(p: &'a [T], c: usize, what: &str) -> Result<&'a [T]> {
    p.get(..c).ok_or_else(|| {
        Error::shape(format!("{what}: {c} active channels but only {} parameters", p.len()))
    })
}

/// Reduction groups as `(channel, element ranges)`. Per-channel groups span
/// the batch; per-sample groups are single planes.
fn groups(dims: [usize; 4], per_sample: bool) -> Vec<(usize, Vec<Range<usize>>)> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let span = |b: usize, j: usize| {
        let base = (b * c + j) * plane;
        base..base + plane
    };
    if per_sample {
        (0..n).flat_map(|b| (0..c).map(move |j| (j, vec![span(b, j)]))).collect()
    } else {
        (0..c).map(|j| (j, (0..n).map(|b| span(b, j)).collect())).collect()
    }
}

fn group_len(ranges: &[Range<usize>]) -> usize {
    ranges.iter().map(|r| r.len()).sum()
}

/// PN forward over the first `x.shape[1]` channels of the parameter vectors.
pub fn pn_forward<T: Scalar>(
    x: &Tensor<T>,
    alpha: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
    phase: Phase,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let dims = x.dims4("pn_forward")?;
    let c = dims[1];
    let alpha = channel_params(alpha, c, "pn alpha")?;
    let gamma = channel_params(gamma, c, "pn gamma")?;
    let beta = channel_params(beta, c, "pn beta")?;
    let per_sample = phase == Phase::Eval;
    let eps = T::of(eps);
    let xd = x.data();
    let mut y = Tensor::zeros(x.shape());
    let yd = y.data_mut();
    let groups = groups(dims, per_sample);
    let mut stat = Vec::with_capacity(groups.len());
    for (j, ranges) in &groups {
        let a = alpha[*j];
        let mut sq = T::zero();
        for r in ranges {
            for &v in &xd[r.clone()] {
                let d = v - a;
                sq += d * d;
            }
        }
        let rms = (sq / T::of(group_len(ranges) as f64)).sqrt();
        let s = rms + eps;
        let scale = if s > T::zero() { gamma[*j] / s } else { T::zero() };
        for r in ranges {
            for (o, &v) in yd[r.clone()].iter_mut().zip(&xd[r.clone()]) {
                *o = scale * (v - a) + beta[*j];
            }
        }
        stat.push(rms);
    }
    Ok((y, NormCache { stat, per_sample }))
}

/// Exact gradients of PN, including the dependence of the RMS on `x` and `α`.
/// Returns `(grad_x, grad_alpha, grad_gamma, grad_beta)`, each parameter
/// gradient sized to the active channel count.
pub fn pn_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    alpha: &[T],
    gamma: &[T],
    eps: f64,
    cache: &NormCache<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>, Vec<T>)> {
    let dims = x.dims4("pn_backward")?;
    grad_out.expect_shape(x.shape(), "pn_backward grad_out")?;
    let c = dims[1];
    let alpha = channel_params(alpha, c, "pn alpha")?;
    let gamma = channel_params(gamma, c, "pn gamma")?;
    let eps = T::of(eps);
    let (xd, gd) = (x.data(), grad_out.data());
    let mut gx = Tensor::zeros(x.shape());
    let gxd = gx.data_mut();
    let mut ga = vec![T::zero(); c];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let groups = groups(dims, cache.per_sample);
    if groups.len() != cache.stat.len() {
        return Err(Error::shape("pn_backward: cache does not match input"));
    }
    for ((j, ranges), &rms) in groups.iter().zip(&cache.stat) {
        let (j, a) = (*j, alpha[*j]);
        let s = rms + eps;
        if s <= T::zero() {
            // x̂ is identically zero; only β receives gradient
            for r in ranges {
                for &g in &gd[r.clone()] {
                    gb[j] += g;
                }
            }
            continue;
        }
        let mut dot = T::zero();
        for r in ranges {
            for (&g, &v) in gd[r.clone()].iter().zip(&xd[r.clone()]) {
                let d = v - a;
                gb[j] += g;
                gg[j] += g * (d / s);
                dot += g * d;
            }
        }
        dot *= gamma[j];
        let m = T::of(group_len(ranges) as f64);
        let coef = if rms > T::zero() { dot / (s * s * m * rms) } else { T::zero() };
        let gs = gamma[j] / s;
        let mut sum = T::zero();
        for r in ranges {
            for ((o, &g), &v) in gxd[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xd[r.clone()]) {
                *o = g * gs - coef * (v - a);
                sum += *o;
            }
        }
        ga[j] -= sum;
    }
    Ok((gx, ga, gg, gb))
}

/// Static batch normalization: each call normalizes by the statistics of the
/// batch it is given, in both phases.
pub fn sbn_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
    phase: Phase,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let dims = x.dims4("sbn_forward")?;
    if phase == Phase::Train && dims[0] < 2 {
        return Err(Error::invalid("static batch norm needs a batch of at least 2 while training"));
    }
    let c = dims[1];
    let gamma = channel_params(gamma, c, "sbn gamma")?;
    let beta = channel_params(beta, c, "sbn beta")?;
    let (mean, istd) = batch_moments(x, eps);
    let y = affine(x, &mean, &istd, gamma, beta);
    Ok((y, NormCache { stat: istd, per_sample: false }))
}

fn affine<T: Scalar>(x: &Tensor<T>, mean: &[T], istd: &[T], gamma: &[T], beta: &[T]) -> Tensor<T> {
    let dims = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut y = Tensor::zeros(x.shape());
    let (xd, yd) = (x.data(), y.data_mut());
    for (j, ranges) in groups(dims, false) {
        let scale = gamma[j] * istd[j];
        for r in ranges {
            for (o, &v) in yd[r.clone()].iter_mut().zip(&xd[r]) {
                *o = scale * (v - mean[j]) + beta[j];
            }
        }
    }
    y
}

/// Returns `(grad_x, grad_gamma, grad_beta)` for batch-statistics
/// normalization (shared by sBN and training-mode BN).
pub fn sbn_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &[T],
    cache: &NormCache<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let dims = x.dims4("sbn_backward")?;
    grad_out.expect_shape(x.shape(), "sbn_backward grad_out")?;
    let c = dims[1];
    let gamma = channel_params(gamma, c, "sbn gamma")?;
    let (xd, gd) = (x.data(), grad_out.data());
    let mut gx = Tensor::zeros(x.shape());
    let gxd = gx.data_mut();
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for (j, ranges) in groups(dims, false) {
        let m = T::of(group_len(&ranges) as f64);
        let istd = cache.stat[j];
        let mut mean = T::zero();
        for r in &ranges {
            for &v in &xd[r.clone()] {
                mean += v;
            }
        }
        mean /= m;
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for r in &ranges {
            for (&g, &v) in gd[r.clone()].iter().zip(&xd[r.clone()]) {
                sum_g += g;
                sum_gx += g * (v - mean) * istd;
            }
        }
        gb[j] = sum_g;
        gg[j] = sum_gx;
        let k = gamma[j] * istd / m;
        for r in &ranges {
            for ((o, &g), &v) in gxd[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xd[r.clone()]) {
                *o = k * (m * g - sum_g - (v - mean) * istd * sum_gx);
            }
        }
    }
    Ok((gx, gg, gb))
}

/// Per-channel mean and `1/sqrt(var + eps)` over batch and spatial positions.
fn batch_moments<T: Scalar>(x: &Tensor<T>, eps: f64) -> (Vec<T>, Vec<T>) {
    let dims = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let xd = x.data();
    let mut mean = vec![T::zero(); dims[1]];
    let mut istd = vec![T::zero(); dims[1]];
    for (j, ranges) in groups(dims, false) {
        let m = T::of(group_len(&ranges) as f64);
        let mut acc = T::zero();
        for r in &ranges {
            for &v in &xd[r.clone()] {
                acc += v;
            }
        }
        let mu = acc / m;
        let mut var = T::zero();
        for r in &ranges {
            for &v in &xd[r.clone()] {
                var += (v - mu) * (v - mu);
            }
        }
        mean[j] = mu;
        istd[j] = T::one() / (var / m + T::of(eps)).sqrt();
    }
    (mean, istd)
}

/// Standalone PN parameters (the supernet stores the same vectors inside its
/// parameter list).
#[derive(Debug, Clone, PartialEq)]
pub struct PnState<T = f32> {
    pub alpha: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: f64,
}

impl<T: Scalar> PnState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            alpha: vec![T::zero(); channels],
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            eps: DEFAULT_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        if x.dims4("pn")?[1] > self.alpha.len() {
            return Err(Error::shape(format!(
                "{} active channels exceed the {} available",
                x.shape()[1],
                self.alpha.len()
            )));
        }
        Ok(pn_forward(x, &self.alpha, &self.gamma, &self.beta, self.eps, phase)?.0)
    }

    /// Little-endian dump of every field.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in self.alpha.iter().chain(&self.gamma).chain(&self.beta) {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out.extend_from_slice(&self.eps.to_le_bytes());
        out
    }
}

/// Conventional batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: DEFAULT_EPS,
        }
    }

    /// Training normalizes by batch statistics and updates the running
    /// estimates; evaluation uses the running estimates.
    pub fn forward(&mut self, x: &Tensor<T>, phase: Phase) -> Result<(Tensor<T>, NormCache<T>)> {
        let dims = x.dims4("batch_norm")?;
        let c = dims[1];
        if c != self.gamma.len() {
            return Err(Error::shape(format!("batch norm has {} channels, input {c}", self.gamma.len())));
        }
        match phase {
            Phase::Train => {
                let out = sbn_forward(x, &self.gamma, &self.beta, self.eps, Phase::Train)?;
                let (mean, istd) = batch_moments(x, self.eps);
                let mom = T::of(self.momentum);
                let m = (dims[0] * dims[2] * dims[3]) as f64;
                let unbias = T::of(m / (m - 1.0).max(1.0));
                for j in 0..c {
                    let var = T::one() / (istd[j] * istd[j]) - T::of(self.eps);
                    self.running_mean[j] = (T::one() - mom) * self.running_mean[j] + mom * mean[j];
                    self.running_var[j] = (T::one() - mom) * self.running_var[j] + mom * var * unbias;
                }
                Ok(out)
            }
            Phase::Eval => {
                let istd: Vec<T> =
                    self.running_var.iter().map(|&v| T::one() / (v + T::of(self.eps)).sqrt()).collect();
                let y = affine(x, &self.running_mean, &istd, &self.gamma, &self.beta);
                Ok((y, NormCache { stat: istd, per_sample: false }))
            }
        }
    }
}
