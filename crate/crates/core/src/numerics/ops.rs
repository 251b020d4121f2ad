use crate::error::{Error, Result};

/// `ln Σ exp(vᵢ)`, shifted by the maximum so it never overflows.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Argument("logsumexp of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::numeric("logsumexp input"));
    }
    let s: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(v)?;
    Ok(v.iter().map(|&x| (x - lse).exp()).collect())
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(v)?;
    Ok(v.iter().map(|&x| x - lse).collect())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
