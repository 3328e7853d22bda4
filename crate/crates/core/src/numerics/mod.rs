//! Dense reverse-mode differentiation substrate and optimiser.

mod adam;
mod fdcheck;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use fdcheck::{finite_difference_check, FdReport};
pub use params::{GradBuffer, ParamId, ParamStore};
pub use tape::{masked_softmax_value, Gradients, Tape, Var, LOG_EPS, NORM_EPS};
pub use tensor::Tensor;
