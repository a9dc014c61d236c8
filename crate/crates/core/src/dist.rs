//! Distribution primitives shared by every model.
//!
//! Each primitive comes in two forms: a plain value-level function over
//! single vectors, and a batched form that records onto a [`Graph`] so it
//! can be differentiated. The two are tested against each other.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Fixed observation variance of every decoder, in normalized units.
pub const DECODER_VARIANCE: f64 = 1.0;

/// Diagonal Gaussian with clamped log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Array1<f64>,
    pub log_var: Array1<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Array1<f64>, log_var: Array1<f64>) -> Result<Self> {
        ensure!(
            mean.len() == log_var.len(),
            "mean has {} entries but log_var has {}",
            mean.len(),
            log_var.len()
        );
        let log_var = log_var.mapv(|v| {
            if v.is_nan() {
                0.0
            } else {
                v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
            }
        });
        Ok(DiagGaussian { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: Array1::zeros(dim),
            log_var: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Array1<f64> {
        self.log_var.mapv(f64::exp)
    }

    pub fn log_density(&self, x: &Array1<f64>) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((m, lv), xi)| -0.5 * ((2.0 * PI).ln() + lv + (xi - m).powi(2) / lv.exp()))
            .sum()
    }
}

/// Logits of the discrete cluster variable.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPosterior {
    pub logits: Array1<f64>,
}

impl CategoricalPosterior {
    pub fn new(logits: Array1<f64>) -> Result<Self> {
        ensure!(!logits.is_empty(), "categorical needs at least one class");
        Ok(CategoricalPosterior { logits })
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn probs(&self) -> Array1<f64> {
        softmax(&self.logits)
    }

    /// Most probable class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        crate::nn::argmax(self.logits.view())
    }
}

/// A point on the simplex produced by the Gumbel-softmax relaxation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedSample {
    pub probs: Array1<f64>,
    pub temperature: f64,
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - lse)
}

/// `mean + exp(log_var / 2) ⊙ eps`.
pub fn reparam_sample(g: &DiagGaussian, eps: &Array1<f64>) -> Result<Array1<f64>> {
    ensure!(
        eps.len() == g.dim(),
        "noise has {} entries, distribution has {}",
        eps.len(),
        g.dim()
    );
    Ok(&g.mean + &(g.log_var.mapv(|lv| (0.5 * lv).exp()) * eps))
}

/// Closed-form `KL(q || p)` for diagonal Gaussians.
pub fn kl_diag_gaussians(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    ensure!(q.dim() == p.dim(), "KL between dims {} and {}", q.dim(), p.dim());
    let kl: f64 = (0..q.dim())
        .map(|i| {
            let (mq, lq, mp, lp) = (q.mean[i], q.log_var[i], p.mean[i], p.log_var[i]);
            0.5 * (lp - lq + ((lq - lp).exp()) + (mq - mp).powi(2) * (-lp).exp() - 1.0)
        })
        .sum();
    Ok(kl.max(0.0))
}

/// Gumbel-softmax relaxed sample from uniform draws `u ∈ (0,1)^K`.
pub fn gumbel_softmax_sample(
    c: &CategoricalPosterior,
    temperature: f64,
    u: &Array1<f64>,
) -> Result<RelaxedSample> {
    ensure!(temperature > 0.0, "temperature must be positive, got {temperature}");
    ensure!(u.len() == c.k(), "need {} uniforms, got {}", c.k(), u.len());
    ensure!(
        u.iter().all(|&v| v > 0.0 && v < 1.0),
        "uniform draws must lie in (0, 1)"
    );
    let perturbed = (&c.logits + &u.mapv(gumbel_from_uniform)) / temperature;
    Ok(RelaxedSample {
        probs: softmax(&perturbed),
        temperature,
    })
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// `−Σ p log p` of the softmax of the logits.
pub fn categorical_entropy(c: &CategoricalPosterior) -> f64 {
    let lp = log_softmax(&c.logits);
    let h: f64 = -lp.iter().map(|&l| l.exp() * l).sum::<f64>();
    h.max(0.0)
}

/// `KL(q || Uniform(K))`.
pub fn categorical_kl_uniform(c: &CategoricalPosterior) -> f64 {
    let log_k = (c.k() as f64).ln();
    let lp = log_softmax(&c.logits);
    lp.iter().map(|&l| l.exp() * (l + log_k)).sum()
}

/// Log-density of `x` under `N(mean, variance · I)`.
pub fn gaussian_log_likelihood(x: &Array1<f64>, mean: &Array1<f64>, variance: f64) -> Result<f64> {
    ensure!(x.len() == mean.len(), "x has {} dims, mean has {}", x.len(), mean.len());
    ensure!(variance > 0.0, "variance must be positive");
    let norm = -0.5 * (2.0 * PI * variance).ln();
    Ok(x
        .iter()
        .zip(mean)
        .map(|(xi, mi)| norm - (xi - mi).powi(2) / (2.0 * variance))
        .sum())
}

// ---------------------------------------------------------------------------
// Batched, differentiable forms. Rows index the batch.

/// Mean and clamped log-variance nodes of a batch of diagonal Gaussians.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVars {
    /// Splits a `n × 2d` head output into mean and clamped log-variance.
    pub fn from_head(g: &mut Graph, raw: Var) -> Self {
        let d = g.shape(raw).1 / 2;
        let mean = g.slice_cols(raw, 0, d);
        let lv = g.slice_cols(raw, d, 2 * d);
        let log_var = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        GaussianVars { mean, log_var }
    }

    pub fn new(g: &mut Graph, mean: Var, log_var: Var) -> Self {
        let log_var = g.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX);
        GaussianVars { mean, log_var }
    }

    pub fn to_value(&self, g: &Graph, row: usize) -> DiagGaussian {
        DiagGaussian {
            mean: g.value(self.mean).row(row).to_owned(),
            log_var: g.value(self.log_var).row(row).to_owned(),
        }
    }
}

pub fn reparam(g: &mut Graph, dist: GaussianVars, eps: Var) -> Var {
    let half = g.scale(dist.log_var, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps);
    g.add(dist.mean, noise)
}

/// Per-row `KL(q || p)`, an `n × 1` column.
pub fn kl_rows(g: &mut Graph, q: GaussianVars, p: GaussianVars) -> Var {
    let lv_diff = g.sub(q.log_var, p.log_var);
    let ratio = g.exp(lv_diff);
    let dmean = g.sub(q.mean, p.mean);
    let sq = g.square(dmean);
    let neg_lvp = g.neg(p.log_var);
    let inv_var_p = g.exp(neg_lvp);
    let scaled = g.mul(sq, inv_var_p);
    let a = g.add(ratio, scaled);
    let b = g.sub(a, lv_diff);
    let c = g.add_scalar(b, -1.0);
    let s = g.sum_cols(c);
    g.scale(s, 0.5)
}

/// Per-row entropy of `softmax(logits)`.
pub fn entropy_rows(g: &mut Graph, logits: Var) -> Var {
    let lp = g.log_softmax(logits);
    let p = g.softmax(logits);
    let plp = g.mul(p, lp);
    let s = g.sum_cols(plp);
    g.neg(s)
}

/// Per-row `KL(softmax(logits) || Uniform(K))`, computed directly rather
/// than through the entropy.
pub fn kl_uniform_rows(g: &mut Graph, logits: Var) -> Var {
    let k = g.shape(logits).1 as f64;
    let lp = g.log_softmax(logits);
    let p = g.softmax(logits);
    let shifted = g.add_scalar(lp, k.ln());
    let terms = g.mul(p, shifted);
    g.sum_cols(terms)
}

/// Relaxed one-hot rows `softmax((logits + gumbel) / τ)`.
pub fn gumbel_softmax(g: &mut Graph, logits: Var, gumbel: Array2<f64>, temperature: f64) -> Var {
    assert!(temperature > 0.0, "temperature must be positive");
    let noise = g.constant(gumbel);
    let perturbed = g.add(logits, noise);
    let scaled = g.scale(perturbed, 1.0 / temperature);
    g.softmax(scaled)
}

/// Per-row log-likelihood of `x` under a fixed-variance Gaussian decoder.
pub fn gaussian_loglik_rows(g: &mut Graph, x: Var, mean: Var, variance: f64) -> Var {
    let d = g.shape(x).1 as f64;
    let diff = g.sub(x, mean);
    let sq = g.square(diff);
    let s = g.sum_cols(sq);
    let scaled = g.scale(s, -0.5 / variance);
    g.add_scalar(scaled, -0.5 * d * (2.0 * PI * variance).ln())
}
