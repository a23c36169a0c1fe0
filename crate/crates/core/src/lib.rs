//! Locate bias inside a small transformer encoder by movement-pruning its
//! attention blocks against a debiasing objective while the weights stay
//! frozen.
//!
//! The modules build on each other:
//!
//! - [`tensor`]: `f64` tensors with reverse-mode autodiff, plus
//!   [`grad_check`] for finite-difference verification.
//! - [`encoder`]: a post-LN BERT-style encoder, tokenizer, planted-bias
//!   corpus generator and masked-LM pretraining.
//! - [`pruning`]: block scores, sigmoid-threshold masks with a
//!   straight-through gradient, the threshold schedule and density / head
//!   analytics.
//! - [`debias`]: the orthogonality-plus-regularizer objective and its
//!   layer × scope modes.
//! - [`eval`]: association-test effect sizes, stereotype score, a linear
//!   probe and the performance-bias trade-off report.

pub mod checkpoint;
pub mod debias;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grad_check;
pub mod optim;
pub mod pruning;
pub mod rng;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
