//! Hierarchical variational autoencoders with structured priors for
//! separating pathology from anatomy, trained and evaluated on synthetic
//! brain phantoms with known generative factors.

pub mod error;
pub mod evalsuite;
pub mod gaussian;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod objectives;
pub mod phantom;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{HvaeError, Result};
pub use real::Real;
pub use tensor::Tensor;
