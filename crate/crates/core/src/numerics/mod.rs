//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine sized
//! for desk-scale transformer training.

mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_subset, GradCheckReport};
pub use params::{ParamId, ParamSet};
pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
