//! One-shot functional testing of quantized neural networks mapped onto
//! memristive crossbars.
//!
//! A single learned input drives the fault-free network's logits to zero mean
//! and unit standard deviation. Deviations of the deployed network show up as
//! a Kullback-Leibler divergence of the observed output statistics from the
//! unit Gaussian, so one forward pass per device tests it.

pub mod error;
pub mod faultlab;
pub mod gradcheck;
pub mod harness;
pub mod netgraph;
pub mod oneshot;
pub mod quantmap;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
