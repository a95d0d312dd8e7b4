//! Adversarially learned latent perturbations for one-class anomaly detection.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every piece of the
//! method that is pure computation: a small reverse-mode autodiff engine,
//! layers and optimizers, the encoder/decoder/distorter networks, the
//! alternating training loop, anomaly scoring, ROC metrics, and the byte
//! level dataset and checkpoint codecs. File IO and the command line live in
//! the `alps` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod protocol;
pub mod real;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use autodiff::{Activation, Graph, Var};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
