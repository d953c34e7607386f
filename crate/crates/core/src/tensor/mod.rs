//! Dense `f64` tensors with a reverse-mode gradient tape.

mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod tape;
mod value;

pub use gradcheck::{gradcheck, rel_error, GradEntry, GradcheckOptions, GradcheckReport};
pub use ops::topk_indices;
pub use tape::{Gradients, Tape, Var};
pub use value::Tensor;
