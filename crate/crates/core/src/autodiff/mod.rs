//! Minimal dense-tensor numerics with reverse-mode differentiation: a flat
//! `Tensor` value type, a replayable operation tape, named parameter sets,
//! and an independent finite-difference gradient checker.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Param, ParamBind, ParamGroup, ParamSet};
pub use tape::{AttnMask, Gradients, Tape, ValId};
pub use tensor::{sigmoid_scalar, Tensor};
