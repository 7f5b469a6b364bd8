//! Joint Tucker-2 low-rank compression and PGD adversarial training for
//! small convolutional networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense row-major tensors, permutation, GEMM-backed contraction
//! - [`linalg`]: thin SVD and best rank-k truncation
//! - [`tucker`]: Tucker-2 decompose / recover / project and the factorized convolution
//! - [`rank_select`]: global singular-value rank selection and its variants
//! - [`nn`]: a small differentiable CNN engine with manual backpropagation
//! - [`attack`]: L∞ PGD
//! - [`train`]: the augmented-Lagrangian regularization phase and factorized fine-tuning
//! - [`io`]: datasets, checkpoints, run configuration, metrics, benchmark
//!
//! [`oracles`] holds slow reference implementations used by the self-test and the
//! test suites; nothing on the production path calls into it.

pub mod attack;
pub mod conv;
mod error;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod oracles;
pub mod rank_select;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod tucker;

pub use error::{Error, Result};
pub use tensor::Tensor;
