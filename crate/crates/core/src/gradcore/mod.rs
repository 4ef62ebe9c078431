//! Dense tensors and tape-based reverse-mode automatic differentiation.
//!
//! Every learnable computation in the crate is expressed as a sequence of
//! [`Tape`] operations. The tape is generic over the element type so the same
//! graph can be evaluated in `f64` when gradients are checked numerically.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, op_suite, CheckResult, GradCheck, FD_STEP, REL_TOLERANCE};
pub use tape::{OpKind, Tape, Var};
pub use tensor::{gemm, numel, MatRef, Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
}
