//! Minimal deterministic CPU network engine.

mod engine;
pub mod kernels;
mod optim;
mod params;
mod spec;

pub use engine::{backward, backward_with_features, forward, forward_trace, Trace};
pub use optim::{sgd_step, LrSchedule, SgdConfig};
pub use params::{init_bound, init_params, LayerParams, Params};
pub use spec::{LayerSpec, NetworkSpec};
