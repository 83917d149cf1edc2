//! Arbitrary-scale single-image super-resolution.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod meta_upscale;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod workflows;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
