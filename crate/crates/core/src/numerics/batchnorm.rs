use serde::{Deserialize, Serialize};

use super::{Matrix, ParamSlot};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

/// Train mode uses batch statistics; eval mode uses the running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-column batch normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamSlot,
    pub beta: ParamSlot,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    mode: Mode,
    xhat: Matrix,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            gamma: ParamSlot::new(Matrix::filled(1, width, 1.0)),
            beta: ParamSlot::new(Matrix::zeros(1, width)),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&self, x: &Matrix, mode: Mode) -> Result<(Matrix, BatchNormCache)> {
        let (n, c) = x.shape();
        if c != self.width() {
            return Err(Error::Shape {
                op: "batch_norm",
                left: x.shape(),
                right: (1, self.width()),
            });
        }
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batch norm in train mode needs at least 2 rows, got {n}"
                    )));
                }
                column_moments(x)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        for r in 0..n {
            let xr = x.row(r);
            let hr = xhat.row_mut(r);
            let or = &mut out.data_mut()[r * c..(r + 1) * c];
            for j in 0..c {
                let h = (xr[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                or[j] = gamma[j] * h + beta[j];
            }
        }
        Ok((
            out,
            BatchNormCache {
                mode,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    /// Folds the batch statistics of a train-mode pass into the running ones.
    pub fn commit_stats(&mut self, cache: &BatchNormCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        for j in 0..self.width() {
            self.running_mean[j] = m * self.running_mean[j] + (1.0 - m) * cache.batch_mean[j];
            self.running_var[j] = m * self.running_var[j] + (1.0 - m) * cache.batch_var[j];
        }
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &BatchNormCache, g: &Matrix) -> Matrix {
        let (n, c) = g.shape();
        let gamma = self.gamma.value.data().to_vec();
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for r in 0..n {
            let gr = g.row(r);
            let hr = cache.xhat.row(r);
            for j in 0..c {
                sum_g[j] += gr[j];
                sum_gx[j] += gr[j] * hr[j];
            }
        }
        {
            let dgamma = self.gamma.grad.data_mut();
            for j in 0..c {
                dgamma[j] += sum_gx[j];
            }
            let dbeta = self.beta.grad.data_mut();
            for j in 0..c {
                dbeta[j] += sum_g[j];
            }
        }
        let mut dx = Matrix::zeros(n, c);
        match cache.mode {
            Mode::Eval => {
                for r in 0..n {
                    let gr = g.row(r);
                    let dr = dx.row_mut(r);
                    for j in 0..c {
                        dr[j] = gr[j] * gamma[j] * cache.inv_std[j];
                    }
                }
            }
            Mode::Train => {
                let nf = n as f64;
                for r in 0..n {
                    let gr = g.row(r);
                    let hr = cache.xhat.row(r);
                    let dr = dx.row_mut(r);
                    for j in 0..c {
                        dr[j] = gamma[j] * cache.inv_std[j] / nf
                            * (nf * gr[j] - sum_g[j] - hr[j] * sum_gx[j]);
                    }
                }
            }
        }
        dx
    }
}

/// Column means and biased variances.
fn column_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = x.shape();
    let nf = n as f64;
    let mut mean = vec![0.0; c];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![0.0; c];
    for r in 0..n {
        for j in 0..c {
            let d = x.get(r, j) - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= nf);
    (mean, var)
}

/// Functional form: normalizes `x` with the given parameters and, in train
/// mode, updates `running_mean`/`running_var` in place.
pub fn batch_norm_forward(
    x: &Matrix,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &mut [f64],
    running_var: &mut [f64],
    mode: Mode,
) -> Result<Matrix> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::Argument(format!(
            "batch norm parameter lengths must equal {c} columns"
        )));
    }
    let mut bn = BatchNorm::new(c);
    bn.gamma.value = Matrix::row_vector(gamma);
    bn.beta.value = Matrix::row_vector(beta);
    bn.running_mean = running_mean.to_vec();
    bn.running_var = running_var.to_vec();
    let (out, cache) = bn.forward(x, mode)?;
    bn.commit_stats(&cache);
    running_mean.copy_from_slice(&bn.running_mean);
    running_var.copy_from_slice(&bn.running_var);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradient_check, GradCheckOptions, SlotList};

    #[test]
    fn unit_column_is_unchanged_up_to_eps() {
        let x = Matrix::from_rows(&[[1.0], [-1.0]]);
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let y = batch_norm_forward(&x, &[1.0], &[0.0], &mut rm, &mut rv, Mode::Train).unwrap();
        let s = 1.0 / (1.0 + BN_EPSILON).sqrt();
        assert!((y.get(0, 0) - s).abs() < 1e-15);
        assert!((y.get(1, 0) + s).abs() < 1e-15);
        // running stats moved toward batch stats (mean 0, var 1)
        assert_eq!(rm, vec![0.0]);
        assert!((rv[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let x = Matrix::from_rows(&[[3.5], [3.5]]);
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let y = batch_norm_forward(&x, &[1.0], &[0.0], &mut rm, &mut rv, Mode::Train).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        assert!((rm[0] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Matrix::from_rows(&[[3.0]]);
        let (mut rm, mut rv) = (vec![2.0], vec![1.0]);
        let y = batch_norm_forward(&x, &[1.0], &[0.0], &mut rm, &mut rv, Mode::Eval).unwrap();
        assert!((y.get(0, 0) - 1.0).abs() < 1e-5);
        assert_eq!(rm, vec![2.0]);
    }

    #[test]
    fn single_row_train_is_degenerate() {
        let bn = BatchNorm::new(2);
        let err = bn.forward(&Matrix::zeros(1, 2), Mode::Train).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(_)));
    }

    #[test]
    fn train_output_is_standardized() {
        let x = Matrix::from_rows(&[[1.0, 10.0], [2.0, -4.0], [7.0, 0.5], [-3.0, 2.0]]);
        let bn = BatchNorm::new(2);
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| y.get(r, j)).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for mode in [Mode::Train, Mode::Eval] {
            let x0 = Matrix::from_rows(&[[0.3, -1.2, 2.0], [1.1, 0.4, -0.7], [-0.5, 0.9, 0.1], [2.2, -0.3, 0.6]]);
            let upstream = Matrix::from_rows(&[[0.5, -1.0, 0.2], [0.1, 0.3, -0.4], [1.5, -0.2, 0.7], [-0.6, 0.8, 0.9]]);
            let mut bn = BatchNorm::new(3);
            bn.gamma.value = Matrix::row_vector(&[1.3, 0.7, -0.4]);
            bn.beta.value = Matrix::row_vector(&[0.1, -0.2, 0.3]);
            bn.running_mean = vec![0.2, -0.1, 0.4];
            bn.running_var = vec![1.5, 0.8, 2.0];
            let mut slots = SlotList(vec![
                ("x".into(), ParamSlot::new(x0)),
                ("gamma".into(), bn.gamma.clone()),
                ("beta".into(), bn.beta.clone()),
            ]);
            let report = gradient_check(
                &mut slots,
                |s: &mut SlotList, grad: bool| {
                    let mut layer = bn.clone();
                    layer.gamma.value = s.0[1].1.value.clone();
                    layer.beta.value = s.0[2].1.value.clone();
                    let (y, cache) = layer.forward(&s.0[0].1.value, mode)?;
                    let loss: f64 = y.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum();
                    if grad {
                        let dx = layer.backward(&cache, &upstream);
                        s.0[0].1.grad.add_assign(&dx)?;
                        s.0[1].1.grad.add_assign(&layer.gamma.grad)?;
                        s.0[2].1.grad.add_assign(&layer.beta.grad)?;
                    }
                    Ok(loss)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{mode:?}: {report:?}");
        }
    }
}
