//! Mixture-density head: a univariate Gaussian mixture over the next
//! acceleration.
//!
//! A raw output row of length `3K` is split as `[weight logits | means |
//! log-stds]`. Weights are the softmax of the logits, means are the identity,
//! and stds are `exp(s)` clamped to `[STD_FLOOR, STD_CEIL]`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::log_softmax;

pub const STD_FLOOR: f64 = 1e-3;
pub const STD_CEIL: f64 = 50.0;
/// Samples are clamped to this magnitude (m/s²).
pub const SAMPLE_CLAMP: f64 = 8.0;
pub const DEFAULT_COMPONENTS: usize = 30;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    weights: Vec<f64>,
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl GmmParams {
    /// Validates: equal lengths, weights non-negative summing to 1 within
    /// 1e-10, stds positive and finite.
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
            return Err(Error::Argument(format!(
                "mixture component counts differ: {} weights, {} means, {} stds",
                weights.len(),
                means.len(),
                stds.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return Err(Error::Argument("mixture weights must be a probability vector".into()));
        }
        if means.iter().any(|m| !m.is_finite()) || stds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Argument("mixture means must be finite and stds positive".into()));
        }
        Ok(GmmParams { weights, means, stds })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    /// Direct (non-log-domain) density; underflows for far-away `a`.
    pub fn density(&self, a: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((w, m), s)| {
                let z = (a - m) / s;
                w * (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
            })
            .sum()
    }

    fn component_log_terms(&self, a: f64) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((w, m), s)| {
                let z = (a - m) / s;
                w.ln() - HALF_LN_2PI - s.ln() - 0.5 * z * z
            })
            .collect()
    }
}

/// Log-sum-exp tolerant of `-inf` entries (zero-weight components).
fn lse_allowing_neg_inf(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Splits and activates a raw head row of length `3K`.
pub fn mdn_forward(raw: &[f64]) -> Result<GmmParams> {
    if raw.is_empty() || raw.len() % 3 != 0 {
        return Err(Error::Argument(format!(
            "mixture head output length {} is not a positive multiple of 3",
            raw.len()
        )));
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("mixture head output"));
    }
    let k = raw.len() / 3;
    let log_w = log_softmax(&raw[..k])?;
    let weights: Vec<f64> = log_w.iter().map(|l| l.exp()).collect();
    let means = raw[k..2 * k].to_vec();
    let stds = raw[2 * k..].iter().map(|s| s.exp().clamp(STD_FLOOR, STD_CEIL)).collect();
    // renormalize away the last-ulp drift of exp(log_softmax)
    let total: f64 = weights.iter().sum();
    let weights = weights.into_iter().map(|w| w / total).collect();
    GmmParams::new(weights, means, stds)
}

/// Negative log-likelihood `-ln p(a)`, evaluated in the log domain.
pub fn gmm_nll(params: &GmmParams, a: f64) -> f64 {
    -lse_allowing_neg_inf(&params.component_log_terms(a))
}

/// Draws a component from the weights, then a Gaussian sample, clamped to
/// `±SAMPLE_CLAMP`.
pub fn gmm_sample<R: Rng + ?Sized>(params: &GmmParams, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut idx = params.components() - 1;
    for (i, w) in params.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            idx = i;
            break;
        }
    }
    let z: f64 = rng.sample(StandardNormal);
    (params.means[idx] + params.stds[idx] * z).clamp(-SAMPLE_CLAMP, SAMPLE_CLAMP)
}

/// NLL of `target` under the mixture encoded by `raw`, and its gradient
/// with respect to `raw`.
pub fn mdn_nll_grad(raw: &[f64], target: f64) -> Result<(f64, Vec<f64>)> {
    if raw.is_empty() || raw.len() % 3 != 0 {
        return Err(Error::Argument(format!(
            "mixture head output length {} is not a positive multiple of 3",
            raw.len()
        )));
    }
    if !target.is_finite() || raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("mixture likelihood input"));
    }
    let k = raw.len() / 3;
    let log_w = log_softmax(&raw[..k])?;
    let (lo, hi) = (STD_FLOOR.ln(), STD_CEIL.ln());
    let mut terms = Vec::with_capacity(k);
    let mut z2 = Vec::with_capacity(k);
    for i in 0..k {
        let ls = raw[2 * k + i].clamp(lo, hi);
        let inv_var = (-2.0 * ls).exp();
        let d = target - raw[k + i];
        z2.push(d * d * inv_var);
        terms.push(log_w[i] - HALF_LN_2PI - ls - 0.5 * d * d * inv_var);
    }
    let lse = lse_allowing_neg_inf(&terms);
    if !lse.is_finite() {
        return Err(Error::numeric("mixture likelihood"));
    }
    let mut grad = vec![0.0; 3 * k];
    for i in 0..k {
        let r = (terms[i] - lse).exp();
        let s = raw[2 * k + i];
        let inv_var = (-2.0 * s.clamp(lo, hi)).exp();
        grad[i] = log_w[i].exp() - r;
        grad[k + i] = -r * (target - raw[k + i]) * inv_var;
        grad[2 * k + i] = if s > lo && s < hi { r * (1.0 - z2[i]) } else { 0.0 };
    }
    Ok((-lse, grad))
}
