//! Non-generative generalized zero-shot learning by task-correlated feature
//! disentanglement and controllable pseudo-sample synthesis.
//!
//! Visual features are split by adversarially trained encoders into a
//! task-correlated factor `h_cor` and a task-independent factor `h_ind`.
//! Pseudo samples of classes without training data are synthesised by adding
//! offsets, produced from semantic-vector differences, to real `h_cor`
//! vectors. A compatibility head scores latents against class semantics.

pub mod compat;
pub mod data;
pub mod disentangler;
pub mod error;
pub mod eval;
pub mod model;
pub mod numkernel;
pub mod par;
pub mod sweep;
pub mod synthesis;
pub mod trainer;

pub use error::{Error, Result};
