//! Parameter registry, layers and optimizer.

mod linear;
mod optim;
mod params;

pub use linear::{LayerNorm, Linear};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
