//! Exact Hessian spectra of small neural networks.
//!
//! The crate builds fully connected networks over a flat parameter vector,
//! differentiates their mean loss to second order, assembles dense Hessians
//! and Gauss-Newton matrices, and analyses the resulting eigenvalue spectra
//! against training dynamics and random-matrix predictions.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod ggn;
pub mod landscape;
pub mod matrix;
pub mod model;
pub mod rmt;
pub mod spectrum;
pub mod train;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
