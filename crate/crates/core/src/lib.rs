//! Knowledge distillation along a teacher's optimization route.
//!
//! A teacher is trained while every epoch's parameters are captured; a
//! student is then distilled against an easy-to-hard sequence of those
//! checkpoints ("anchors") instead of only the converged teacher. Anchor
//! sequences come from equal-epoch-interval sampling, a one-stage variant
//! that switches anchors inside a single schedule, or a greedy search driven
//! by validation-set KL hardness. Diagnostics cover KL curves against the
//! whole trajectory, PCA projection of training trajectories and robustness
//! to Gaussian input noise.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! `*32` aliases below are the production instantiation.

pub mod analysis;
pub mod data;
pub mod error;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod rng;
mod fit;
mod scalar;
pub mod strategy;
mod tensor;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, ErrorCategory, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Params32 = nn::Params<f32>;
pub type Dataset32 = data::Dataset<f32>;
pub type Checkpoint32 = trajectory::Checkpoint<f32>;
pub type Trajectory32 = trajectory::Trajectory<f32>;
pub type RunReport32 = trainer::RunReport<f32>;

pub type Tensor64 = Tensor<f64>;
pub type Params64 = nn::Params<f64>;
