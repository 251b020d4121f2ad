use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{gemm_into, matmul, Matrix, ParamSlot, Trans};

/// Glorot/Xavier uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

/// Per-node affine map `x W (+ b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamSlot,
    pub bias: Option<ParamSlot>,
}

impl Dense {
    pub fn new(w: Matrix, bias: Option<Matrix>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.shape() != (1, w.cols()) {
                return Err(Error::Shape {
                    op: "dense bias",
                    left: b.shape(),
                    right: (1, w.cols()),
                });
            }
        }
        Ok(Dense {
            w: ParamSlot::new(w),
            bias: bias.map(ParamSlot::new),
        })
    }

    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, with_bias: bool, rng: &mut R) -> Self {
        Dense {
            w: ParamSlot::new(glorot(input, output, rng)),
            bias: with_bias.then(|| ParamSlot::new(Matrix::zeros(1, output))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.value.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = matmul(x, &self.w.value)?;
        if let Some(b) = &self.bias {
            add_row_broadcast(&mut out, b.value.data());
        }
        Ok(out)
    }

    /// Accumulates `dW`, `db` and returns `dx` for the input `x` of the
    /// forward pass.
    pub fn backward(&mut self, x: &Matrix, g: &Matrix) -> Result<Matrix> {
        gemm_into(&mut self.w.grad, 1.0, x, Trans::Yes, g, Trans::No)?;
        if let Some(b) = &mut self.bias {
            add_column_sums(b.grad.data_mut(), g);
        }
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        gemm_into(&mut dx, 0.0, g, Trans::No, &self.w.value, Trans::Yes)?;
        Ok(dx)
    }
}

pub(crate) fn add_row_broadcast(m: &mut Matrix, row: &[f64]) {
    for r in 0..m.rows() {
        for (x, b) in m.row_mut(r).iter_mut().zip(row) {
            *x += b;
        }
    }
}

pub(crate) fn add_column_sums(acc: &mut [f64], g: &Matrix) {
    for r in 0..g.rows() {
        for (a, x) in acc.iter_mut().zip(g.row(r)) {
            *a += x;
        }
    }
}
