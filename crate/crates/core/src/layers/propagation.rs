//! Graph-convolution propagation rules.
//!
//! * base: `agg · H · W`, with `agg` the self-looped normalized adjacency;
//! * ego:  `agg · H · W + H · B`, where the central node has its own weights
//!   and `agg` has no self-loops (binary or closeness-weighted).
//!
//! Both return pre-activations; the model applies ReLU / batch norm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dense::glorot;
use crate::error::{Error, Result};
use crate::numerics::{gemm_into, matmul, Matrix, ParamSlot, Trans};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    Base,
    Ego,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationLayer {
    /// Neighbor (aggregation) weights.
    pub w: ParamSlot,
    /// Central-node weights, present for the ego rule.
    pub b: Option<ParamSlot>,
}

#[derive(Clone, Debug)]
pub struct PropagationCache {
    agg_h: Matrix,
}

impl PropagationLayer {
    pub fn new(w: Matrix, b: Option<Matrix>) -> Result<Self> {
        if let Some(b) = &b {
            if b.shape() != w.shape() {
                return Err(Error::Shape {
                    op: "propagation weights",
                    left: w.shape(),
                    right: b.shape(),
                });
            }
        }
        Ok(PropagationLayer {
            w: ParamSlot::new(w),
            b: b.map(ParamSlot::new),
        })
    }

    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, mode: PropagationMode, rng: &mut R) -> Self {
        let w = glorot(input, output, rng);
        let b = (mode == PropagationMode::Ego).then(|| glorot(input, output, rng));
        PropagationLayer {
            w: ParamSlot::new(w),
            b: b.map(ParamSlot::new),
        }
    }

    pub fn forward(&self, h: &Matrix, agg: &Matrix, mode: PropagationMode) -> Result<(Matrix, PropagationCache)> {
        let agg_h = matmul(agg, h)?;
        let mut out = matmul(&agg_h, &self.w.value)?;
        if mode == PropagationMode::Ego {
            let b = self.ego_weights()?;
            gemm_into(&mut out, 1.0, h, Trans::No, &b.value, Trans::No)?;
        }
        Ok((out, PropagationCache { agg_h }))
    }

    /// Accumulates weight gradients and returns `dH`.
    pub fn backward(
        &mut self,
        h: &Matrix,
        agg: &Matrix,
        cache: &PropagationCache,
        g: &Matrix,
        mode: PropagationMode,
    ) -> Result<Matrix> {
        gemm_into(&mut self.w.grad, 1.0, &cache.agg_h, Trans::Yes, g, Trans::No)?;
        // dH = aggᵀ (G Wᵀ) + G Bᵀ
        let mut g_wt = Matrix::zeros(g.rows(), self.w.value.rows());
        gemm_into(&mut g_wt, 0.0, g, Trans::No, &self.w.value, Trans::Yes)?;
        let mut dh = Matrix::zeros(h.rows(), h.cols());
        gemm_into(&mut dh, 0.0, agg, Trans::Yes, &g_wt, Trans::No)?;
        if mode == PropagationMode::Ego {
            let b = self
                .b
                .as_mut()
                .ok_or_else(|| Error::Config("ego propagation requires central-node weights".into()))?;
            gemm_into(&mut b.grad, 1.0, h, Trans::Yes, g, Trans::No)?;
            gemm_into(&mut dh, 1.0, g, Trans::No, &b.value, Trans::Yes)?;
        }
        Ok(dh)
    }

    fn ego_weights(&self) -> Result<&ParamSlot> {
        self.b
            .as_ref()
            .ok_or_else(|| Error::Config("ego propagation requires central-node weights".into()))
    }
}

/// Pre-activation output of one propagation layer.
pub fn propagate(h: &Matrix, agg: &Matrix, params: &PropagationLayer, mode: PropagationMode) -> Result<Matrix> {
    if agg.rows() != agg.cols() || agg.cols() != h.rows() {
        return Err(Error::Shape {
            op: "propagate",
            left: agg.shape(),
            right: h.shape(),
        });
    }
    Ok(params.forward(h, agg, mode)?.0)
}
