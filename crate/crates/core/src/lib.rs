//! AU-conditioned diffusion face editing on a synthetic parametric-face
//! domain.

pub mod au;
pub mod checkpoint;
pub mod diffcore;
pub mod error;
pub mod estimators;
pub mod evalharness;
pub mod rng;
pub mod sampler;
pub mod synthface;
pub mod trainer;

pub use error::{Error, Result};
