//! SeqNet: a lightweight convolutional detector over whole raw binaries.
//!
//! Binaries are normalized to `[-1, 1]`, linearly resampled to a fixed
//! length, and classified by a stack of sequence depthwise separable
//! convolution (SDSC) blocks. The crate also carries the training loop, an
//! appended-poison evasion attack and Grad-CAM explanations.

pub mod adversarial;
pub mod autodiff;
pub mod cost;
pub mod error;
pub mod explain;
pub mod layers;
mod linalg;
pub mod model;
pub mod preprocess;
pub mod parallel;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{finite_difference_check, Graph, VarId};
pub use error::{Error, Result};
pub use tensor::Tensor;
