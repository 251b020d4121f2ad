//! Network building blocks: dense maps, graph propagation, attention, the
//! recurrent cell and the mixture-density head.

mod dense;
mod gat;
mod gmm;
mod lstm;
mod propagation;

pub use dense::{glorot, Dense};
pub use gat::{gat_attention, Attention, GatCache, GatLayer, DEFAULT_LEAKY_SLOPE};
pub use gmm::{
    gmm_nll, gmm_sample, mdn_forward, mdn_nll_grad, GmmParams, DEFAULT_COMPONENTS, SAMPLE_CLAMP, STD_CEIL, STD_FLOOR,
};
pub use lstm::{lstm_step, Lstm, LstmStepCache};
pub use propagation::{propagate, PropagationCache, PropagationLayer, PropagationMode};
