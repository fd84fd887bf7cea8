//! Reverse-mode automatic differentiation on a per-step tape.

pub mod adam;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, rel_error, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
