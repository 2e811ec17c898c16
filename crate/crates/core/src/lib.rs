//! Meta-learning with a learned self-critique step.
//!
//! A base classifier adapts to a task's labeled support set by plain SGD,
//! then keeps adapting on the *unlabeled* target set by descending a learned
//! critic score. Training differentiates through the whole adaptation to
//! update the initialization, the critic, and the task embedder jointly.
//!
//! Layering, bottom up: [`tensor`] (tape autodiff), [`params`]/[`model`]
//! (parameter sets and the base MLP), [`embed`]/[`critic`] (the learned
//! critique), [`episodes`] (task sampling), [`meta`] (inner/outer loops),
//! [`config`]/[`harness`] (training runs, checkpoints, evaluation).

pub mod check;
pub mod config;
pub mod critic;
pub mod embed;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod meta;
pub mod model;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{finite_diff_oracle, grad, ParamLayout, ParameterSet};
pub use tensor::{concat, grad_tensors, Tape, Tensor};
