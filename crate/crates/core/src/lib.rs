//! Spatio-temporal forecasting engine built around U-Net variants with
//! depthwise-separable convolutions and convolutional block attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode autodiff graph;
//! - [`nn`]: convolution blocks, attention, the four model variants and
//!   checkpoint files;
//! - [`optim`]: Adam, cosine annealing with warm restarts and the training loop;
//! - [`data`]: frame-sequence datasets, sample assembly and a synthetic
//!   generator;
//! - [`eval`]: persistence baseline, normalized scoring and ensembles.

pub mod data;
pub mod error;
pub mod eval;
mod io;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use io::parse_kv;
pub use tensor::{Graph, Scalar, Tensor, Var};
