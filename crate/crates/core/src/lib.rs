//! THz tomographic imaging laboratory.
//!
//! Simulates multi-spectral terahertz time-domain measurements of 3D
//! phantoms, restores degraded 2D projections with a subspace-and-attention
//! fusion network built on a from-scratch differentiable tensor engine, and
//! reconstructs 3D volumes via filtered back-projection or SART.

pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod sim;
pub mod tape;
pub mod tensor;
pub mod tomo;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
