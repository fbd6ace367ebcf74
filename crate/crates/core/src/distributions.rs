//! Diagonal Gaussians, as plain values and as nodes on a [`Graph`].

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, RngStream, Tensor};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

fn half_ln_2pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagGaussian {
    /// `log_std` is clamped into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::Dim {
                expected: mean.len(),
                got: log_std.len(),
            });
        }
        let log_std = log_std
            .into_iter()
            .map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    /// KL(self ‖ q).
    pub fn kl(&self, q: &DiagGaussian) -> Result<f64> {
        kl(self, q)
    }

    pub fn nll(&self, x: &[f64]) -> Result<f64> {
        nll(self, x)
    }

    pub fn rsample(&self, rng: &mut RngStream) -> Vec<f64> {
        rsample(self, rng)
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Dim { expected: a, got: b })
    }
}

/// Written so that `kl(p, p)` evaluates to exactly zero.
fn kl_term(mp: f64, lp: f64, mq: f64, lq: f64) -> f64 {
    let dm = mp - mq;
    (lq - lp) + 0.5 * ((2.0 * (lp - lq)).exp() + dm * dm * (-2.0 * lq).exp()) - 0.5
}

pub fn kl(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    check_dims(p.dim(), q.dim())?;
    Ok((0..p.dim())
        .map(|j| kl_term(p.mean[j], p.log_std[j], q.mean[j], q.log_std[j]))
        .sum())
}

pub fn nll(p: &DiagGaussian, x: &[f64]) -> Result<f64> {
    check_dims(p.dim(), x.len())?;
    Ok((0..p.dim())
        .map(|j| {
            let z = (x[j] - p.mean[j]) * (-p.log_std[j]).exp();
            half_ln_2pi() + p.log_std[j] + 0.5 * z * z
        })
        .sum())
}

pub fn rsample(p: &DiagGaussian, rng: &mut RngStream) -> Vec<f64> {
    p.mean
        .iter()
        .zip(&p.log_std)
        .map(|(m, l)| m + l.exp() * rng.normal())
        .collect()
}

/// A batch of diagonal Gaussians on a graph, one per row.
#[derive(Clone, Copy, Debug)]
pub struct GaussianNode {
    pub mean: NodeId,
    /// Already clamped.
    pub log_std: NodeId,
}

impl GaussianNode {
    /// Splits `[n, 2·dim]` head output into mean and clamped log-std.
    pub fn from_head(g: &mut Graph<'_>, raw: NodeId, dim: usize) -> Self {
        let mean = g.slice_cols(raw, 0, dim);
        let l = g.slice_cols(raw, dim, dim);
        let log_std = g.clamp(l, LOG_STD_MIN, LOG_STD_MAX);
        Self { mean, log_std }
    }

    /// Row `r` as a plain value.
    pub fn row(&self, g: &Graph<'_>, r: usize) -> DiagGaussian {
        DiagGaussian {
            mean: g.value(self.mean).row_slice(r).to_vec(),
            log_std: g.value(self.log_std).row_slice(r).to_vec(),
        }
    }

    /// Reparameterized sample `mean + exp(log_std)·eps`.
    pub fn rsample(&self, g: &mut Graph<'_>, eps: Tensor) -> NodeId {
        let e = g.constant(eps);
        let s = g.exp(self.log_std);
        let noise = g.mul(s, e);
        g.add(self.mean, noise)
    }
}

/// Per-row KL(p ‖ q) as `[n, 1]`.
pub fn kl_rows(g: &mut Graph<'_>, p: GaussianNode, q: GaussianNode) -> NodeId {
    let dl = g.sub(p.log_std, q.log_std);
    let neg = g.neg(dl);
    let dl2 = g.scale(dl, 2.0);
    let ratio = g.exp(dl2);
    let dm = g.sub(p.mean, q.mean);
    let dm2 = g.square(dm);
    let lq2 = g.scale(q.log_std, -2.0);
    let inv = g.exp(lq2);
    let quad = g.mul(dm2, inv);
    let inner = g.add(ratio, quad);
    let half = g.scale(inner, 0.5);
    let t = g.add(neg, half);
    let t = g.add_scalar(t, -0.5);
    g.sum_cols(t)
}

/// Per-row negative log-density of `x` as `[n, 1]`.
pub fn nll_rows(g: &mut Graph<'_>, p: GaussianNode, x: NodeId) -> NodeId {
    let d = g.sub(x, p.mean);
    let nl = g.neg(p.log_std);
    let inv = g.exp(nl);
    let z = g.mul(d, inv);
    let z2 = g.square(z);
    let half = g.scale(z2, 0.5);
    let t = g.add(half, p.log_std);
    let t = g.add_scalar(t, half_ln_2pi());
    g.sum_cols(t)
}

/// Per-row negative log-density under a unit-variance Gaussian at `mean`.
pub fn nll_unit_rows(g: &mut Graph<'_>, mean: NodeId, x: NodeId) -> NodeId {
    let d = g.sub(x, mean);
    let d2 = g.square(d);
    let half = g.scale(d2, 0.5);
    let t = g.add_scalar(half, half_ln_2pi());
    g.sum_cols(t)
}
