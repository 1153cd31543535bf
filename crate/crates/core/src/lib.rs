//! Knowledge distillation by virtual relation matching.
//!
//! Teacher and student predictions on a real view and a transformed
//! (virtual) view of each sample are turned into cross-view affinity edges;
//! the student is trained to match the teacher's edges under a Huber
//! penalty, after pruning edges whose endpoints disagree too much.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]), the relation and loss machinery ([`relations`],
//! [`pruning`], [`vrm_loss`], [`baselines`]), and a desk-scale harness with
//! MLPs, synthetic data and diagnostics.

pub mod augment;
pub mod autodiff;
pub mod baselines;
pub mod check;
pub mod config;
pub mod data;
pub mod desk;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod pruning;
pub mod relations;
pub mod tensor;
pub mod train;
pub mod vrm_loss;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
