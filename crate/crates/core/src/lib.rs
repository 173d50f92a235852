//! Anisotropic composition of task vectors on small blocked models.
//!
//! A task vector is the blockwise difference between fine-tuned and
//! pre-trained weights. Instead of one global scale, every (task vector,
//! block) pair gets its own learned coefficient, optionally split further
//! into `K` random partitions per block. The coefficients are trained by
//! gradient descent for task addition, negation, few-shot and test-time
//! adaptation, on either the plain or the linearised model.

pub mod blocks;
pub mod cli;
pub mod compose;
pub mod data;
pub mod error;
pub mod evalx;
pub mod intrinsic;
pub mod learn;
pub mod lora;
pub mod net;
pub mod optim;
pub mod partition;
pub mod seeds;
pub mod select;
pub mod suite;
pub mod tta;
pub mod tvck;

pub use blocks::{apply_anisotropic, apply_isotropic, diff, BlockKind, BlockSpec, BlockedTensor, CoefficientSet, Payload, TaskVector};
pub use error::{Error, Result};
pub use net::{Batch, Logits, Loss, ModelConfig, ToyModel};
