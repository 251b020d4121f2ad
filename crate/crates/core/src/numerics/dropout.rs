use rand::Rng;

use super::{Matrix, Mode};
use crate::error::{Error, Result};

/// Recorded inverted-dropout mask; `None` means the pass was the identity.
#[derive(Clone, Debug)]
pub struct DropoutMask(Option<Vec<f64>>);

/// Inverted dropout: survivors are scaled by `1/(1-rate)` so eval mode is the identity.
pub fn dropout<R: Rng + ?Sized>(x: &Matrix, rate: f64, rng: &mut R, mode: Mode) -> Result<(Matrix, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), DropoutMask(None)));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.data().len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mut out = x.clone();
    for (o, m) in out.data_mut().iter_mut().zip(&mask) {
        *o *= m;
    }
    Ok((out, DropoutMask(Some(mask))))
}

impl DropoutMask {
    pub fn backward(&self, g: &Matrix) -> Matrix {
        match &self.0 {
            None => g.clone(),
            Some(mask) => {
                let mut out = g.clone();
                for (o, m) in out.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                out
            }
        }
    }
}
