//! Multi-order space-time self-similarity (STSS).
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, the neural primitives, and a fixed-graph
//!   reverse-mode differentiator.
//! * [`stss`]: the 6D self-similarity volume with its backward pass and a
//!   brute-force oracle.
//! * [`encoder`]: maps from an STSS volume back to a feature map.
//! * [`moss`]: recursive high-order STSS and the multi-order module.
//! * [`synthdata`], [`train`], [`viz`]: the toy experiment and its tooling.
//! * [`checks`]: oracle sweeps, finite-difference suites, and timing used by
//!   the CLI and the acceptance tests.
//!
//! Data-parallel loops go through [`exec::Exec`]; with the `parallel` feature
//! disabled every kernel runs its sequential path.

pub mod checks;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod moss;
pub mod real;
pub mod stss;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use exec::Exec;
pub use real::{DType, Real};
pub use tensor::Tensor;
