//! Dense `f64` matrices and the handful of differentiable primitives the
//! models are built from. Every primitive has a hand-written reverse pass;
//! [`gradient_check`] validates them against central finite differences.

mod batchnorm;
mod dropout;
mod gradcheck;
mod matrix;
mod ops;
mod params;

pub use batchnorm::{batch_norm_forward, BatchNorm, BatchNormCache, Mode, BN_EPSILON, BN_MOMENTUM};
pub use dropout::{dropout, DropoutMask};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport, Probe};
pub use matrix::{gemm_into, matmul, matmul_backward, matmul_nt, matmul_tn, Matrix, Trans};
pub use ops::{log_softmax, logsumexp, sigmoid, softmax};
pub use params::{ParamSlot, Parameters, SlotList};
