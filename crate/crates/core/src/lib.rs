//! Toy-scale future-representation alignment for diffusion action policies.

pub mod alignment;
pub mod autograd;
pub mod checkpoint;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod mipa;
pub mod nn;
pub mod pipeline;

pub use autograd::{Real, Tape, Tensor, Var};
pub use error::{FrappeError, Result};
