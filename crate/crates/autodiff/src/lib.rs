//! Reverse-mode differentiable array engine.
//!
//! A [`Tensor`] is a dense row-major array of `f32` or `f64` values. Forward
//! computation is recorded on a [`Tape`]; [`Tape::backward`] replays the
//! recording in reverse and returns adjoints for every `requires_grad` leaf.
//! The engine is single-threaded and fully deterministic: identical inputs
//! produce bit-identical outputs.

mod checkpoint;
mod conv;
mod error;
mod gradcheck;
mod ops;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{AdError, Result};
pub use gradcheck::{grad_check, tape_grad_check, write_back_grads};
pub use ops::Alignment;
pub use optim::{AdamW, AdamWConfig, Optimizer, Sgd, SgdConfig, SliceMask};
pub use params::{ParamId, ParamStore};
pub use scalar::{Dtype, Scalar};
pub use tape::{bmm, concat, conv2d, cross_entropy, embed, gamma_reparam, gumbel_straight_through, norm_feature, norm_spatial, Conv2dSpec, Gradients, Tape, Var};
pub use tensor::Tensor;
