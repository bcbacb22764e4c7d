//! Configuration, artifact export, checkpoints and loss landscapes.

mod checkpoint;
mod config;
mod export;
mod landscape;

pub use checkpoint::{
    checkpoint_load, checkpoint_save, from_bytes, to_bytes, Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC,
};
pub use config::{
    load_config, parse_config, ConfigError, DatasetSource, EtaSource, LoadedConfig, Origin, RunConfig, KEYS,
};
pub use export::{
    config_hash, export_genotype, export_metrics, export_policy, manifest_text, metrics_row, sha256_hex,
    write_manifest, write_text, ExportError, MetricsWriter, METRICS_HEADER, METRICS_VERSION,
};
pub use landscape::{
    filter_normalized_direction, grid_coords, landscape, landscape_with_directions, perturb, LandscapeError,
    LandscapeGrid,
};

use crate::data::{load_csv, load_idx, synth_blobs, synth_moons, DataError, Dataset};
use crate::scheduler::Trainer;
use crate::tensor::Tensor;

/// Loads or generates the configured dataset and splits it into
/// `(train, holdout)`.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), DataError> {
    let path = || cfg.data_path.clone().unwrap_or_default();
    let data = match cfg.dataset {
        DatasetSource::Blobs => synth_blobs(cfg.samples, cfg.classes, cfg.data_seed)?,
        DatasetSource::Moons => synth_moons(cfg.samples, cfg.noise, cfg.data_seed)?,
        DatasetSource::Csv => {
            let p = path();
            let column = match cfg.label_column {
                Some(c) => c,
                None => last_column(&p, cfg.has_header)?,
            };
            load_csv(&p, column, cfg.has_header)?
        }
        DatasetSource::Idx => load_idx(&path(), &cfg.labels_path.clone().unwrap_or_default())?,
    };
    Ok(data.split(cfg.holdout_fraction, cfg.data_seed))
}

fn last_column(path: &std::path::Path, has_header: bool) -> Result<usize, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let first = text
        .lines()
        .skip(usize::from(has_header))
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| DataError::Empty(path.display().to_string()))?;
    Ok(first.split(',').count().saturating_sub(1))
}

/// The fixed evaluation batch: the first `eval_batch` held-out samples, or
/// training samples when there is no holdout split.
pub fn landscape_batch(trainer: &Trainer) -> Dataset {
    let src = if trainer.holdout_data().is_empty() {
        trainer.train_data()
    } else {
        trainer.holdout_data()
    };
    let n = trainer.config().eval_batch.min(src.len());
    Dataset {
        samples: src.samples[..n].to_vec(),
        ..src.clone()
    }
}

/// Loss surface of the trainer's current network around its weights. The
/// trainer's state is only read.
pub fn model_landscape(
    trainer: &Trainer,
    resolution: usize,
    range: f64,
    seeds: (u64, u64),
) -> Result<LandscapeGrid, LandscapeError> {
    let batch = landscape_batch(trainer);
    let store = &trainer.state().params;
    let center: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let mut work = store.clone();
    let (grid, _, _) = landscape(&center, resolution, range, seeds, |point| {
        for (i, t) in point.iter().enumerate() {
            *work.tensor_mut(i) = t.clone();
        }
        trainer.evaluate_with(&work, &batch).map(|(loss, _)| loss).map_err(|e| e.to_string())
    })?;
    Ok(grid)
}
