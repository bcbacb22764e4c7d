//! Differentiable augmentation policy over ordered pairs of transforms.

mod policy;
mod transforms;

pub use policy::{
    augment_batch, da_loss, da_loss_and_grad, gumbel, sample_pairs, update_tau, AugmentedBatch, Catalog,
    DaPolicy, PairDraw, WeightMode,
};
pub use transforms::{apply_transform, sample_magnitude, TransformKind, TransformOp, MAX_MAGNITUDE};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("unknown augmentation operation {0:?}")]
    UnknownOp(String),
    #[error("operation {op} cannot be applied to an input of shape {shape:?}")]
    IncompatibleOp { op: &'static str, shape: Vec<usize> },
    #[error("magnitude {0} outside [0, 10]")]
    MagnitudeOutOfRange(f64),
    #[error("policy temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite policy gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: u64 },
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
