//! Small dense reverse-mode differentiation engine.

mod sgd;
mod tape;
mod tensor;

pub use sgd::{sgd_step, ParamSlot};
pub use tape::{Activation, Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::logsumexp_raw;
