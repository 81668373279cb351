//! Minimal dense tensors with define-by-run reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Tape`] as [`Var`] handles and differentiated with [`Tape::backward`].
//! Every kernel is generic over [`Real`] so the same code path runs in `f32`
//! for training and in `f64` for [`gradcheck`].

mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod par;
mod real;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{gradcheck, GradcheckReport, GRADCHECK_ABS_FLOOR, GRADCHECK_TOLERANCE};
pub use optim::{sgd_step, OptimizerConfig, Sgd};
pub use real::Real;
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
