//! Desk-scale normalizing-flow density estimation with
//! likelihood-contribution-guided multi-scale factorization.
//!
//! The crate is organised bottom-up:
//! - [`tensor`]: dense f64 tensors and the FFT1 container format
//! - [`autodiff`]: tape-based reverse-mode differentiation over tensors
//! - [`flow`]: coupling/squeeze/factor layers and full flow models
//! - [`plan`]: factorization planning (likelihood-contribution heuristic
//!   and baselines)
//! - [`data`]: synthetic datasets, dataset files and PGM/PPM images
//! - [`train`]: preprocessing, Adam training, evaluation and sampling

pub mod autodiff;
pub mod data;
pub mod error;
pub mod flow;
pub mod plan;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
