//! Keypoint estimation with a self-supervised reconstruction bottleneck, a
//! transformer affinity decoder and test-time personalization, on a
//! synthetic articulated-figure benchmark.
//!
//! The differentiable stack (tensor, tape, optimizer, networks) is generic
//! over [`scalar::Scalar`]; the aliases below pin it to `f64`, which the
//! data pipeline, trainer and evaluation use throughout.

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod keypoints;
pub mod model;
pub mod ops;
pub mod optim;
pub mod posenet;
pub mod puppet;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod transformer;
pub mod ttp;

pub use error::{Error, Result};

pub type Real = f64;
pub type Tensor = tensor::Tensor<Real>;
pub type Tape = tape::Tape<Real>;
pub type ParamStore = optim::ParamStore<Real>;
