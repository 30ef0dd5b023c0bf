//! A minimal tape-based reverse-mode differentiation engine.
//!
//! Operations are recorded on a [`Tape`] in execution order, so the node
//! list is already topologically sorted; [`Tape::backward`] walks it once in
//! reverse. Only the primitives the keyword model and its losses need are
//! provided, with explicit shapes and no broadcasting beyond bias addition.

mod gradcheck;
mod ops;
mod params;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_with, FdOptions, FdReport};
pub use params::{BoundParams, ParameterSet};
pub use real::Real;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
