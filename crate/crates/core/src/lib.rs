//! Automatic structured pruning for small feed-forward CNNs.
//!
//! The pipeline trains a baseline, then runs progressive rounds of
//! simulated-annealing hyperparameter search followed by ADMM-regularized
//! structured pruning (filter and column schemes combined), and finally
//! purifies near-zero structures and physically shrinks the network.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod model;
pub mod sa;
pub mod schemes;
pub mod admm;
pub mod seeds;
pub mod purify;
pub mod driver;
pub mod fixtures;
