//! Feature distillation with a learnable channel-wise transform, at desk scale.
//!
//! The crate carries its own small autodiff core ([`tensor`]), a zoo of
//! student-side feature transforms ([`nn`]), tiny teacher/student CNNs ([`models`]),
//! the distillation losses ([`distill`]), synthetic data ([`data`]), an SGD trainer
//! ([`train`]), diagnostics ([`diag`]) and the experiment front end ([`cli`]).

// `!(x > 0.0)` is used on purpose throughout validation: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod diag;
pub mod distill;
pub mod error;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Axes, Tape, Tensor, Var};
