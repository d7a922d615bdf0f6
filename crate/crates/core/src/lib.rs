pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod sampling;
pub mod snn;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tape::{Gradients, SignalKind, Tape, Var};
pub use tensor::{Element, Tensor};
