use rand::Rng;

use super::dense::{add_column_sums, add_row_broadcast, glorot};
use crate::error::{Error, Result};
use crate::numerics::{gemm_into, sigmoid, Matrix, ParamSlot, Trans};

/// LSTM cell with gate blocks laid out as `[input, forget, cell, output]`
/// along the columns of every weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    /// in_dim x 4H.
    pub w_x: ParamSlot,
    /// H x 4H.
    pub w_h: ParamSlot,
    /// 1 x 4H.
    pub bias: ParamSlot,
}

#[derive(Clone, Debug)]
pub struct LstmStepCache {
    x: Matrix,
    h_prev: Matrix,
    c_prev: Matrix,
    /// Activated gates, N x 4H.
    gates: Matrix,
    tanh_c: Matrix,
}

impl Lstm {
    pub fn glorot<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Lstm {
            w_x: ParamSlot::new(glorot(input, 4 * hidden, rng)),
            w_h: ParamSlot::new(glorot(hidden, 4 * hidden, rng)),
            bias: ParamSlot::new(Matrix::zeros(1, 4 * hidden)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.value.rows()
    }

    /// One step for a batch of rows. Returns `(h, c, cache)`.
    pub fn step(&self, x: &Matrix, h_prev: &Matrix, c_prev: &Matrix) -> Result<(Matrix, Matrix, LstmStepCache)> {
        let hd = self.hidden();
        let n = x.rows();
        if h_prev.shape() != (n, hd) || c_prev.shape() != (n, hd) {
            return Err(Error::Shape {
                op: "lstm state",
                left: h_prev.shape(),
                right: (n, hd),
            });
        }
        let mut gates = Matrix::zeros(n, 4 * hd);
        gemm_into(&mut gates, 0.0, x, Trans::No, &self.w_x.value, Trans::No)?;
        gemm_into(&mut gates, 1.0, h_prev, Trans::No, &self.w_h.value, Trans::No)?;
        add_row_broadcast(&mut gates, self.bias.value.data());

        let mut h = Matrix::zeros(n, hd);
        let mut c = Matrix::zeros(n, hd);
        let mut tanh_c = Matrix::zeros(n, hd);
        for r in 0..n {
            let g = gates.row_mut(r);
            for j in 0..hd {
                g[j] = sigmoid(g[j]);
                g[hd + j] = sigmoid(g[hd + j]);
                g[2 * hd + j] = g[2 * hd + j].tanh();
                g[3 * hd + j] = sigmoid(g[3 * hd + j]);
            }
            let g = gates.row(r);
            let cp = c_prev.row(r);
            for j in 0..hd {
                let cv = g[hd + j] * cp[j] + g[j] * g[2 * hd + j];
                let tc = cv.tanh();
                c.set(r, j, cv);
                tanh_c.set(r, j, tc);
                h.set(r, j, g[3 * hd + j] * tc);
            }
        }
        let cache = LstmStepCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            c_prev: c_prev.clone(),
            gates,
            tanh_c,
        };
        Ok((h, c, cache))
    }

    /// Backward through one step given gradients w.r.t. the step's `h` and
    /// `c` outputs. Returns `(dx, dh_prev, dc_prev)`.
    pub fn step_backward(
        &mut self,
        cache: &LstmStepCache,
        dh: &Matrix,
        dc: Option<&Matrix>,
    ) -> Result<(Matrix, Matrix, Matrix)> {
        let hd = self.hidden();
        let n = dh.rows();
        let mut dpre = Matrix::zeros(n, 4 * hd);
        let mut dc_prev = Matrix::zeros(n, hd);
        for r in 0..n {
            let g = cache.gates.row(r);
            let tc = cache.tanh_c.row(r);
            let cp = cache.c_prev.row(r);
            let dhr = dh.row(r);
            let d = dpre.row_mut(r);
            for j in 0..hd {
                let (i, f, gg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                let dct = dc.map_or(0.0, |m| m.get(r, j)) + dhr[j] * o * (1.0 - tc[j] * tc[j]);
                d[j] = dct * gg * i * (1.0 - i);
                d[hd + j] = dct * cp[j] * f * (1.0 - f);
                d[2 * hd + j] = dct * i * (1.0 - gg * gg);
                d[3 * hd + j] = dhr[j] * tc[j] * o * (1.0 - o);
                dc_prev.set(r, j, dct * f);
            }
        }
        gemm_into(&mut self.w_x.grad, 1.0, &cache.x, Trans::Yes, &dpre, Trans::No)?;
        gemm_into(&mut self.w_h.grad, 1.0, &cache.h_prev, Trans::Yes, &dpre, Trans::No)?;
        add_column_sums(self.bias.grad.data_mut(), &dpre);
        let mut dx = Matrix::zeros(n, cache.x.cols());
        gemm_into(&mut dx, 0.0, &dpre, Trans::No, &self.w_x.value, Trans::Yes)?;
        let mut dh_prev = Matrix::zeros(n, hd);
        gemm_into(&mut dh_prev, 0.0, &dpre, Trans::No, &self.w_h.value, Trans::Yes)?;
        Ok((dx, dh_prev, dc_prev))
    }
}

/// Single-vector LSTM step: `(h', c')` from input `x` and state `(h, c)`.
pub fn lstm_step(cell: &Lstm, x: &[f64], h: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h2, c2, _) = cell.step(&Matrix::row_vector(x), &Matrix::row_vector(h), &Matrix::row_vector(c))?;
    Ok((h2.into_vec(), c2.into_vec()))
}
