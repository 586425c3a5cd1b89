//! Numerical core for complex Swin transformer super-resolution of
//! multi-echo MRI and susceptibility map-weighted imaging (SMWI).
//!
//! Everything here is `no_std` + `alloc`: dense tensors with reverse-mode
//! autodiff, an arbitrary-size FFT, k-space truncation, a seeded phantom
//! generator, Swin/RSTB blocks, the dual-branch network, SMWI reconstruction,
//! image metrics and the Adam training step. File formats and the command
//! line live in the companion `cstn` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod error;
pub mod fft;
pub mod interp;
pub mod metrics;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod mri;
pub mod phantom;
pub mod smwi;
pub mod swin;
pub mod tensor;
pub mod train;

pub use autodiff::{Padding, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
