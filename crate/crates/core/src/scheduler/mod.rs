//! Joint and two-phase training schedules and the ablation harness.

mod mode;
mod trainer;

pub use mode::{PhaseSpec, RunMode, Toggles, UnknownMode};
pub use trainer::{
    arch_config, catalog_for, initial_hparams, initial_state, net_spec, RngStreams, TrainState, Trainer,
    STREAM_AUG, STREAM_GUMBEL, STREAM_INIT, TAG_ETA, TAG_THETA,
};

use thiserror::Error;

use crate::augment::AugmentError;
use crate::data::{DataError, Dataset};
use crate::experiment::RunConfig;
use crate::hpo::HpoError;
use crate::nas::{Genotype, NasError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("diverged at iteration {t}: non-finite {what}")]
    Diverged { t: u64, what: String },
    #[error("invalid run setup: {0}")]
    Config(String),
    #[error("metrics sink failed: {0}")]
    Sink(String),
    #[error(transparent)]
    Nas(#[from] NasError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Hpo(#[from] HpoError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = SchedulerError> = std::result::Result<T, E>;

/// One row of the per-iteration log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub t: u64,
    pub train_loss: f64,
    /// Accuracy on this iteration's (possibly augmented) batch.
    pub train_acc: f64,
    pub holdout_acc: f64,
    pub lr: f64,
    pub wd: f64,
    /// Up to three most likely augmentation pairs with their probabilities.
    pub da_top: Vec<(String, f64)>,
    pub alpha_entropy: f64,
    pub child_params: usize,
    pub ms: f64,
}

/// End-of-run evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub mode: RunMode,
    /// Accuracy over the whole (un-augmented) training split.
    pub train_acc: f64,
    pub holdout_acc: f64,
    pub iterations: u64,
    pub wall_ms: f64,
    pub genotype: Genotype,
    pub child_params: usize,
}

pub struct RunOutput {
    pub state: TrainState,
    pub summary: RunSummary,
    pub metrics: Vec<MetricsRecord>,
}

/// Runs `cfg.mode` to completion, collecting every metrics row.
pub fn run(cfg: &RunConfig, train: Dataset, holdout: Dataset) -> Result<RunOutput> {
    let mut trainer = Trainer::new(cfg, train, holdout)?;
    let mut metrics = Vec::new();
    let summary = trainer.run(|r| {
        metrics.push(r.clone());
        Ok(())
    })?;
    Ok(RunOutput {
        state: trainer.into_state(),
        summary,
        metrics,
    })
}

/// The joint loop with every block updated.
pub fn run_dha(cfg: &RunConfig, train: Dataset, holdout: Dataset) -> Result<RunOutput> {
    run(&RunConfig { mode: RunMode::Dha, ..cfg.clone() }, train, holdout)
}

/// Architecture search first, then from-scratch training of the found cell
/// with augmentation and hyper-parameter updates.
pub fn run_sequential(cfg: &RunConfig, train: Dataset, holdout: Dataset) -> Result<RunOutput> {
    run(
        &RunConfig {
            mode: RunMode::SequentialDha,
            ..cfg.clone()
        },
        train,
        holdout,
    )
}

/// One line of an ablation report.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: RunMode,
    pub train_acc: f64,
    pub holdout_acc: f64,
    pub wall_ms: f64,
    pub iterations: u64,
}

impl From<&RunSummary> for AblationRow {
    fn from(s: &RunSummary) -> Self {
        AblationRow {
            mode: s.mode,
            train_acc: s.train_acc,
            holdout_acc: s.holdout_acc,
            wall_ms: s.wall_ms,
            iterations: s.iterations,
        }
    }
}

pub fn run_ablation(mode: RunMode, cfg: &RunConfig, train: Dataset, holdout: Dataset) -> Result<AblationRow> {
    let out = run(&RunConfig { mode, ..cfg.clone() }, train, holdout)?;
    Ok(AblationRow::from(&out.summary))
}
