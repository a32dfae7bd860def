//! Motion-only multi-object tracking.
//!
//! A constant-velocity Kalman filter and a learned deformable state-space
//! predictor both forecast each track's next box; a small gating network blends
//! them per dimension and attaches an uncertainty, and detections are associated
//! with an IoU-gated score that also rewards motion-trend agreement and penalizes
//! uncertain predictions.
//!
//! The numeric modules are generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, which is what the tracker, trainer and
//! command-line tools use.

pub mod association;
pub mod deform_mamba;
pub mod error;
pub mod gradcheck;
pub mod kalman;
pub mod metrics;
pub mod model;
pub mod mot_io;
pub mod motion_gate;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
