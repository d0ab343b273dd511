//! Core numerics for a SPECT sinogram-denoising pipeline.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that does not
//! touch the filesystem: dense tensors with reverse-mode differentiation,
//! phantom generation, a parallel-beam projector with matched adjoint,
//! Poisson noise, OSEM reconstruction, image quality metrics, and the
//! conditional-GAN denoiser built on top of the autodiff engine.
//!
//! IO, file formats, and the command-line front end live in the companion
//! `sino-cli` crate.

#![no_std]

extern crate alloc;

pub mod adam;
pub mod error;
pub mod gan;
pub mod graph;
pub mod metrics;
pub mod osem;
pub mod phantom;
pub mod projector;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
