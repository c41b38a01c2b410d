//! Low-rank Gaussian convolution for object counting.
//!
//! Gaussian kernels and kernel banks, density-map generation and the
//! moments of noisy density maps, PCA selection of a small Gaussian basis,
//! the low-rank Gaussian convolution layer with reference oracles and manual
//! gradients, desk-scale counting networks, a timing harness and scripted
//! studies.

pub mod bench;
pub mod data;
pub mod density;
pub mod error;
pub mod experiments;
pub mod gconv;
pub mod io;
pub mod kernels;
pub mod lowrank;
pub mod net;
pub mod report;

pub use error::{Error, Result};
