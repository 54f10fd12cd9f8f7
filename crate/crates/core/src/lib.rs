//! Quantized neural networks with exact integer semantics: quantization-aware
//! interval bound propagation for robust training, and a complete
//! branch-and-bound verifier for L-infinity robustness.

pub mod data;
pub mod error;
pub mod fixedpoint;
pub mod ibp;
pub mod io;
pub mod linear;
pub mod network;
pub mod random;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{QnnError, Result};
