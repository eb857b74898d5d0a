//! Squeeze-and-recursion temporal gates on top of a small reverse-mode
//! tensor engine.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches files,
//! the clock or the command line lives in the companion `srtg` crate.
//!
//! Layout:
//! - [`tensor`], [`graph`], [`gradcheck`]: dense f64 tensors and a tape that
//!   records one forward pass and differentiates it.
//! - [`srtg`]: squeeze, stacked LSTM recursion, soft nearest neighbours,
//!   cycle-consistency gate and fusion.
//! - [`backbone`]: Simple/Bottleneck residual blocks with 3D or (2+1)D
//!   convolutions, SRTG placements, networks and the analytic MAC counter.
//! - [`harness`]: synthetic temporal datasets, SGD training and metrics.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
mod kernels;
pub mod math;
pub mod srtg;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
