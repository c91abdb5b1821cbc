//! KV-cache quantization engine and attention error-analysis laboratory.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: 64-bit reference matrices, stable softmax, MSE and a seeded RNG.
//! - [`quantizer`]: group-wise round-to-nearest quantization with packed 1/2/4/8-bit codes.
//! - [`kvcache`]: per-layer cache holding quantized history plus a float residual tail.
//! - [`attention`]: single-head decode attention and a residual-only toy decoder stack.
//! - [`error_analysis`]: staged MSE measurements and closed-form key/value error terms.
//! - [`policy`]: layer-wise asymmetric bit allocation and the analytic memory model.
//! - [`harness`]: file formats, experiment configs and the CLI command implementations.

pub mod attention;
pub mod error;
pub mod error_analysis;
pub mod harness;
pub mod kvcache;
pub mod numerics;
pub mod policy;
pub mod quantizer;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
pub use quantizer::{Axis, QuantSpec, QuantizedTensor};
