//! Datasets, loaders, synthetic generators and mini-batch streams.

mod batch;
mod csv_io;
mod idx;
mod synth;

pub use batch::{Batch, BatchId, BatchSpec, BatchStream, StreamState};
pub use csv_io::{load_csv, load_csv_str, minmax_normalize};
pub use idx::{load_idx, read_idx, write_idx, write_idx_files, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{synth_blobs, synth_moons};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated IDX file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("non-numeric value {value:?} at row {row}, column {column}")]
    NonNumeric { row: usize, column: usize, value: String },
    #[error("empty dataset: {0}")]
    Empty(String),
    #[error("malformed CSV at row {row}: {msg}")]
    Csv { row: usize, msg: String },
    #[error("batch size {batch} exceeds dataset size {size} with drop-last")]
    BatchTooLarge { batch: usize, size: usize },
    #[error("invalid batch spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    /// `[C, H, W]` inputs with values in `[0, 1]`.
    Image,
    /// Flat feature vectors.
    Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Per-sample input shape.
    pub shape: Vec<usize>,
    pub num_classes: usize,
    pub kind: DataKind,
    /// Source path or generator description.
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Deterministic shuffled split into `(train, holdout)`; the holdout gets
    /// `round(len * fraction)` samples.
    pub fn split(&self, holdout_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_hold = ((self.len() as f64) * holdout_fraction).round() as usize;
        let pick = |ids: &[usize], tag: &str| Dataset {
            samples: ids.iter().map(|&i| self.samples[i].clone()).collect(),
            provenance: format!("{} [{tag} split, seed {seed}]", self.provenance),
            ..self.clone_meta()
        };
        (pick(&idx[n_hold..], "train"), pick(&idx[..n_hold], "holdout"))
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            samples: Vec::new(),
            shape: self.shape.clone(),
            num_classes: self.num_classes,
            kind: self.kind,
            provenance: self.provenance.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_partitions_samples() {
        let d = synth_blobs(50, 2, 3).unwrap();
        let (tr, ho) = d.split(0.2, 9);
        assert_eq!(ho.len(), 10);
        assert_eq!(tr.len(), 40);
        let mut all: Vec<_> = tr.samples.iter().chain(&ho.samples).map(|s| s.x.clone()).collect();
        let mut orig: Vec<_> = d.samples.iter().map(|s| s.x.clone()).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(all, orig);
        assert_eq!(d.split(0.2, 9), (tr, ho));
    }
}
