//! Optimization of the mean and covariance of Gaussian random fields.

pub mod cli;
pub mod error;
pub mod kl;
pub mod numerics;
pub mod problems;
pub mod randomfield;
pub mod saa;
pub mod sensitivity;
pub mod sqp;

pub use error::{Error, Result};
