//! Feature-residual forecasting: per-channel multi-scale motion kernels,
//! a learned-gain Kalman correction, optical-flow kernel matching and a
//! small early-recognition evaluation harness over synthetic sequences.

pub mod cli;
pub mod config;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureSequence, FeatureTensor, Kernel, Plane, ResidualSequence};
pub mod flow;
pub mod kalman;
pub mod motion;
pub mod recognize;
pub mod report;
pub mod synth;
