//! One-shot video inpainting at desk scale.
//!
//! Given a clip and the object mask of its first frame, the model
//! propagates the mask to every frame through a key/value memory and
//! removes the object with a stack of temporal (masked) and spatial
//! transformer blocks. Everything is trained end to end on procedurally
//! synthesised clips with a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod completion;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{BoolTensor, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
