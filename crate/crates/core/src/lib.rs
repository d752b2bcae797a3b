//! Motion-aware 3D multi-object tracking.
//!
//! Detections are encoded by their movement relative to each live tracklet,
//! tracklet histories are summarized by a temporal and spatial transformer,
//! and the two are matched by a learned affinity followed by the Hungarian
//! algorithm.

pub mod bank;
pub mod error;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod simulator;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use matcher::{Association, Tracker, TrackerConfig};
pub use model::MomaModel;
pub use scalar::Scalar;
pub use transformer::TransformerConfig;

/// Double-precision model, used for checking and evaluation.
pub type Model64 = MomaModel<f64>;
/// Single-precision model, the usual choice for training.
pub type Model32 = MomaModel<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
