//! Motion forecasting with a unified heterogeneous graph attention network
//! and a map-projection refinement module, on desk-scale synthetic scenarios.

pub mod ablation;
pub mod config;
pub mod encoders;
pub mod error;
pub mod forecaster;
pub mod generator;
pub mod graph;
pub mod hgat;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod refinement;
pub mod scenario;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
