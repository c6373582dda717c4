//! Dense tensors and a per-pass reverse-mode tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_at, relative_error, GradCheckReport, RELATIVE_FLOOR,
};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
