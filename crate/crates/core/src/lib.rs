//! Inference-time steering of frozen trajectory diffusion policies.

pub mod baseline;
pub mod checkpoint;
pub mod demos;
pub mod diffusion;
pub mod error;
pub mod gmm;
pub mod maze;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod schedule;
pub mod scalar;
pub mod steering;
pub mod trajectory;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision policy, the scalar used for training and benchmarking.
pub type Policy = diffusion::DiffusionPolicy<f32>;
pub type Policy64 = diffusion::DiffusionPolicy<f64>;
pub type Baseline = baseline::LatentPolicy<f32>;
pub type Traj = trajectory::Trajectory<f32>;
pub type Traj64 = trajectory::Trajectory<f64>;
pub type Batch = steering::SteeredBatch<f32>;
