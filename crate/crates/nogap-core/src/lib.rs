//! Core library for NOGaP: a Gaussian-process regressor over discretized
//! PDE solution operators whose mean function is a wavelet neural operator.

pub mod container;
pub mod datagen;
pub mod error;
pub mod gp;
pub mod kernels;
pub mod kron;
pub mod metrics;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod wavelet;
pub mod wno;

pub use error::{NogapError, Result};
pub use tensor::Tensor;
