//! Single-kernel graph attention.
//!
//! For a central node `i` and every `k` in its closed neighborhood
//! `{i} ∪ N(i)` the logit is `LeakyReLU((h_i B)·a + (h_k W)·a)`; the
//! coefficients are the softmax of those logits over the neighborhood. The
//! output is `α_ii (h_i B) + Σ_{k∈N(i)} α_ik (h_k W)`, i.e. the central node
//! is transformed by `B` and its neighbors by `W`.

use rand::Rng;

use super::dense::glorot;
use crate::error::{Error, Result};
use crate::numerics::{gemm_into, matmul, softmax, Matrix, ParamSlot, Trans};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct GatLayer {
    /// Neighbor transform.
    pub w: ParamSlot,
    /// Central-node transform.
    pub b: ParamSlot,
    /// Attention vector, 1 x out_dim.
    pub wa: ParamSlot,
    pub leaky_slope: f64,
}

/// Attention coefficients: `alpha[i][k]` belongs to node `neighborhoods[i][k]`;
/// the first entry of every neighborhood is the central node itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub neighborhoods: Vec<Vec<usize>>,
    pub alpha: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct GatCache {
    zw: Matrix,
    zb: Matrix,
    attention: Attention,
    /// Pre-LeakyReLU logits, aligned with `attention.alpha`.
    pre: Vec<Vec<f64>>,
}

impl GatCache {
    pub fn attention(&self) -> &Attention {
        &self.attention
    }

    /// Which side of the LeakyReLU kink every logit fell on.
    pub fn logit_signs(&self) -> impl Iterator<Item = bool> + '_ {
        self.pre.iter().flatten().map(|&x| x > 0.0)
    }
}

impl GatLayer {
    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, leaky_slope: f64, rng: &mut R) -> Self {
        GatLayer {
            w: ParamSlot::new(glorot(input, output, rng)),
            b: ParamSlot::new(glorot(input, output, rng)),
            wa: ParamSlot::new(glorot(1, output, rng)),
            leaky_slope,
        }
    }

    pub fn forward(&self, h: &Matrix, neighbors: &[Vec<usize>]) -> Result<(Matrix, GatCache)> {
        let n = h.rows();
        if neighbors.len() != n {
            return Err(Error::Shape {
                op: "gat neighborhoods",
                left: h.shape(),
                right: (neighbors.len(), 0),
            });
        }
        let c = self.w.value.cols();
        if self.wa.value.shape() != (1, c) || self.b.value.shape() != self.w.value.shape() {
            return Err(Error::Shape {
                op: "gat parameters",
                left: self.w.value.shape(),
                right: self.wa.value.shape(),
            });
        }
        let zw = matmul(h, &self.w.value)?;
        let zb = matmul(h, &self.b.value)?;
        let a = self.wa.value.data();
        let dot = |row: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
        let sw: Vec<f64> = (0..n).map(|i| dot(zw.row(i))).collect();
        let sb: Vec<f64> = (0..n).map(|i| dot(zb.row(i))).collect();

        let mut out = Matrix::zeros(n, c);
        let mut hoods = Vec::with_capacity(n);
        let mut alphas = Vec::with_capacity(n);
        let mut pres = Vec::with_capacity(n);
        for i in 0..n {
            let mut hood = Vec::with_capacity(neighbors[i].len() + 1);
            hood.push(i);
            for &k in &neighbors[i] {
                if k >= n || k == i {
                    return Err(Error::Argument(format!("invalid neighbor {k} of node {i}")));
                }
                hood.push(k);
            }
            let pre: Vec<f64> = hood.iter().map(|&k| sb[i] + sw[k]).collect();
            let logits: Vec<f64> = pre.iter().map(|&x| leaky(x, self.leaky_slope)).collect();
            let alpha = softmax(&logits)?;
            let orow = out.row_mut(i);
            for (pos, (&k, &al)) in hood.iter().zip(&alpha).enumerate() {
                let z = if pos == 0 { zb.row(i) } else { zw.row(k) };
                for (o, zv) in orow.iter_mut().zip(z) {
                    *o += al * zv;
                }
            }
            hoods.push(hood);
            alphas.push(alpha);
            pres.push(pre);
        }
        Ok((
            out,
            GatCache {
                zw,
                zb,
                attention: Attention {
                    neighborhoods: hoods,
                    alpha: alphas,
                },
                pre: pres,
            },
        ))
    }

    /// Accumulates gradients for `W`, `B`, `a` and returns `dH`.
    pub fn backward(&mut self, h: &Matrix, cache: &GatCache, g: &Matrix) -> Result<Matrix> {
        let (n, c) = g.shape();
        let a = self.wa.value.data().to_vec();
        let mut dzw = Matrix::zeros(n, c);
        let mut dzb = Matrix::zeros(n, c);
        let mut dsw = vec![0.0; n];
        let mut dsb = vec![0.0; n];
        for i in 0..n {
            let gi = g.row(i);
            let hood = &cache.attention.neighborhoods[i];
            let alpha = &cache.attention.alpha[i];
            let pre = &cache.pre[i];
            let dalpha: Vec<f64> = hood
                .iter()
                .enumerate()
                .map(|(pos, &k)| {
                    let z = if pos == 0 { cache.zb.row(i) } else { cache.zw.row(k) };
                    gi.iter().zip(z).map(|(x, y)| x * y).sum()
                })
                .collect();
            let weighted: f64 = alpha.iter().zip(&dalpha).map(|(p, d)| p * d).sum();
            for (pos, &k) in hood.iter().enumerate() {
                let target = if pos == 0 { dzb.row_mut(i) } else { dzw.row_mut(k) };
                for (t, x) in target.iter_mut().zip(gi) {
                    *t += alpha[pos] * x;
                }
                let de = alpha[pos] * (dalpha[pos] - weighted);
                let dpre = if pre[pos] > 0.0 { de } else { de * self.leaky_slope };
                dsb[i] += dpre;
                dsw[k] += dpre;
            }
        }
        {
            let da = self.wa.grad.data_mut();
            for i in 0..n {
                let (rb, rw) = (cache.zb.row(i), cache.zw.row(i));
                for j in 0..c {
                    da[j] += dsb[i] * rb[j] + dsw[i] * rw[j];
                }
            }
        }
        for i in 0..n {
            for (j, &aj) in a.iter().enumerate() {
                dzb.row_mut(i)[j] += dsb[i] * aj;
                dzw.row_mut(i)[j] += dsw[i] * aj;
            }
        }
        gemm_into(&mut self.w.grad, 1.0, h, Trans::Yes, &dzw, Trans::No)?;
        gemm_into(&mut self.b.grad, 1.0, h, Trans::Yes, &dzb, Trans::No)?;
        let mut dh = Matrix::zeros(h.rows(), h.cols());
        gemm_into(&mut dh, 0.0, &dzw, Trans::No, &self.w.value, Trans::Yes)?;
        gemm_into(&mut dh, 1.0, &dzb, Trans::No, &self.b.value, Trans::Yes)?;
        Ok(dh)
    }
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Attention coefficients and output of one attention layer.
pub fn gat_attention(h: &Matrix, neighbors: &[Vec<usize>], params: &GatLayer) -> Result<(Attention, Matrix)> {
    let (out, cache) = params.forward(h, neighbors)?;
    Ok((cache.attention, out))
}
