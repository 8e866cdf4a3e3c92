//! Reverse-mode automatic differentiation over dense f64 tensors.

mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport, REL_FLOOR};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{orientation_weights, BnMode, BnStats, CePick, ComposeQuery, Tape, Var, BN_EPS};
pub(crate) use tensor::read_u32;
pub use tensor::Tensor;
