//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! The design is a classic tape: every operation appends a node holding
//! its output value and enough bookkeeping to push gradients back to
//! its operands.  Graphs are built per episode and thrown away after
//! the backward pass; long-lived state (parameters, Adam moments)
//! lives in [`ParamStore`].

mod gradcheck;
pub mod kernels;
mod params;
mod session;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use params::{Param, ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, CHECKPOINT_VERSION};
pub use session::Session;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
