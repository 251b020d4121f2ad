//! Graph-based car-following models for stochastic acceleration
//! prediction on multi-lane freeways.
//!
//! Each frame of a trajectory corpus becomes an interaction graph whose nodes
//! are vehicles; a three-layer network (dense, graph-convolutional, or
//! attention-based, optionally recurrent) maps node features to a Gaussian
//! mixture over each vehicle's next acceleration. Trained models are rolled
//! out in closed loop and scored with trajectory-level metrics.

pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod simulation;
pub mod training;

pub use error::{Error, Result};
