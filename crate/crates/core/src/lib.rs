//! Desk-scale laboratory for multi-axis rotary position encodings.
//!
//! The crate trains a small diffusion-transformer decoder to reconstruct the
//! k-th of several context images, compares convergence across positional
//! encoding schemes, and mines viewpoint-consistent frame pairs from videos.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod rope;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{GradMap, Graph, NodeId};
pub use tensor::Tensor;
