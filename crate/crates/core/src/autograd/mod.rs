//! Reverse-mode automatic differentiation over dense tensors.

mod gemm;
pub mod gradcheck;
pub mod tape;

pub use gradcheck::{grad_check, grad_check_many, grad_check_with, relative_error, GradCheckReport};
pub use tape::{softmax_in_place, CorruptRule, Tape, Var};
