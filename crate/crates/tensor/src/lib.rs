//! Minimal N-d tensor arithmetic with tape-based reverse-mode
//! differentiation, sized for image-to-image networks on the CPU.
//!
//! Data layout for image tensors is `(batch, channel, height, width)`.
//! Storage defaults to 32-bit precision for training with a 64-bit mode for
//! verification; see [`DType`]. Forward passes are deterministic and there
//! is no global state — randomness always enters through caller-supplied
//! generators.

mod dtype;
mod error;
pub mod gradcheck;
mod kernels;
mod tape;

pub use dtype::DType;
pub use error::{Result, TensorError};
pub use tape::{Tape, TensorId};
