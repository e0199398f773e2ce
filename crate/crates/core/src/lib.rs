//! Multi-task learning by aligning pseudo-tasks across architectures.
//!
//! Weight tensors are cut into fixed-size blocks; each block is generated
//! from a shared hypermodule and a per-location context vector, and an
//! evolutionary search decides which hypermodule serves which location.

pub mod alignment;
pub mod bank;
pub mod checkpoint;
pub mod decompose;
pub mod error;
pub mod experiment;
pub mod stats;
pub mod synthetic;
pub mod tensor;
pub mod theory;

pub use error::{MuirError, Result};
