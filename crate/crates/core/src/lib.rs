//! Bidirectional reconstruction of periodic grayscale video with
//! codebook-quantized features, optimal-transport separation of the normal
//! and abnormal feature populations, and spatiotemporal adversarial
//! consistency — plus the synthetic labeled data generator, training loop,
//! and frozen-encoder evaluation harness that make the whole system
//! reproducible on a CPU.

pub mod cdc;
pub mod error;
pub mod eval;
pub mod nets;
pub mod syndata;
pub mod tensor;
pub mod train;
pub mod transport;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Var};
