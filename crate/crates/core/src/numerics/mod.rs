//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use params::{ParamId, ParamStore, Session};
pub use tape::{Gradients, Padding, Tape, Var};
pub use tensor::{Real, Tensor};

