//! Dense tensors and a reverse-mode differentiation tape.
//!
//! The primitive set is fixed: elementwise arithmetic (with scalar
//! broadcasting only), matrix products, the usual activations, reductions,
//! shape manipulation, and the two graph operators. Everything the model
//! needs is composed from these.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_REL_STEP};
pub use params::{Param, ParamStore};
pub use tape::{sigmoid, softplus, softplus_inv, Gradients, Tape, Var};
pub use tensor::Tensor;
