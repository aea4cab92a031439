//! Dense tensors with reverse-mode differentiation.
//!
//! Every op records its inputs on a [`Tape`]; [`Tape::backward`] walks the
//! recording backwards once. Model code is generic over [`Real`] so the same
//! forward pass can be replayed in 64-bit for gradient checks.

mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{
    faulty_op_check, gradcheck, registered_ops, OpCheck, FD_STEP, OP_TOLERANCE, PIPELINE_TOLERANCE,
};
pub use real::Real;
pub(crate) use tape::{logsumexp, softmax_in_place};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
