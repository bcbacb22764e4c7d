//! Cell-based architecture search with compressed, sparsely recovered
//! architecture logits.

mod arch;
mod genotype;
mod ista;
mod measurement;
mod supernet;

pub use arch::{relaxed_node_output, relaxed_weights, ArchConfig, ArchState, NodeCode};
pub use genotype::{
    check_constraint, extract_child, extract_child_constrained, CellOp, CellSpace, Edge, Genotype,
};
pub use ista::{lasso_objective, lipschitz_constant, soft_threshold, ista_recover, IstaConfig, IstaOutcome};
pub use measurement::{init_measurement, mutual_coherence, COHERENCE_LIMIT};
pub use supernet::{
    child_forward, init_params, supernet_forward, Binder, InputKind, NetSpec, ParamStore,
};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NasError {
    #[error("measurement matrix needs m < n, got m={m}, n={n}")]
    Dimension { m: usize, n: usize },
    #[error("no {m}x{n} measurement matrix with coherence below the limit after {attempts} draws (last {coherence:.3})")]
    Coherence {
        m: usize,
        n: usize,
        attempts: usize,
        coherence: f64,
    },
    #[error("shrinkage threshold must be non-negative, got {0}")]
    NegativeThreshold(f64),
    #[error("non-finite value in ISTA iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown cell operation {0:?}")]
    UnknownOp(String),
    #[error("invalid genotype: {0}")]
    InvalidGenotype(String),
    #[error("parameter limit {limit} cannot be met; the smallest child has {minimum} parameters")]
    Unsatisfiable { limit: usize, minimum: usize },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = NasError> = std::result::Result<T, E>;
