//! Minimal dense-tensor engine with a reverse-mode tape, an Adam optimizer
//! and a flat checkpoint format.
//!
//! Production code runs in `f32`. Every operation is generic over [`Real`]
//! so that gradient checks can replay the exact same code path in `f64`.

mod adam;
mod checkpoint;
mod error;
pub mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use error::{Result, TensorError};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
