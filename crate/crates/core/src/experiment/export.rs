//! Metrics CSV, genotype and policy files, and the reproduction manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::checkpoint::FORMAT_VERSION;
use super::config::LoadedConfig;
use crate::scheduler::MetricsRecord;

pub const METRICS_HEADER: [&str; 15] = [
    "t",
    "train_loss",
    "train_acc",
    "holdout_acc",
    "lr",
    "wd",
    "da_top1",
    "da_top1_p",
    "da_top2",
    "da_top2_p",
    "da_top3",
    "da_top3_p",
    "alpha_entropy",
    "child_params",
    "ms",
];

/// Bumped whenever the metrics columns change.
pub const METRICS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Fields of one record in header order.
pub fn metrics_row(r: &MetricsRecord) -> Vec<String> {
    let mut row = vec![
        r.t.to_string(),
        r.train_loss.to_string(),
        r.train_acc.to_string(),
        r.holdout_acc.to_string(),
        r.lr.to_string(),
        r.wd.to_string(),
    ];
    for k in 0..3 {
        match r.da_top.get(k) {
            Some((name, p)) => {
                row.push(name.clone());
                row.push(p.to_string());
            }
            None => row.extend([String::new(), String::new()]),
        }
    }
    row.push(r.alpha_entropy.to_string());
    row.push(r.child_params.to_string());
    row.push(r.ms.to_string());
    row
}

/// Streams metrics rows to a CSV file, header first.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, ExportError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut inner = csv::Writer::from_writer(file);
        let path = path.to_path_buf();
        inner.write_record(METRICS_HEADER).map_err(|source| ExportError::Csv {
            path: path.clone(),
            source,
        })?;
        Ok(MetricsWriter { path, inner })
    }

    /// Appends to an existing metrics file without rewriting the header.
    pub fn append(path: &Path) -> Result<Self, ExportError> {
        let file = fs::OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            inner: csv::Writer::from_writer(file),
        })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<(), ExportError> {
        self.inner.write_record(metrics_row(r)).map_err(|source| ExportError::Csv {
            path: self.path.clone(),
            source,
        })
    }

    pub fn flush(&mut self) -> Result<(), ExportError> {
        self.inner.flush().map_err(io_err(&self.path))
    }
}

/// Writes all records to `path` in one go.
pub fn export_metrics(records: &[MetricsRecord], path: &Path) -> Result<(), ExportError> {
    let mut w = MetricsWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.flush()
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ExportError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

pub fn export_genotype(text: &str, path: &Path) -> Result<(), ExportError> {
    write_text(path, text)
}

pub fn export_policy(text: &str, path: &Path) -> Result<(), ExportError> {
    write_text(path, text)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the fully resolved config text.
pub fn config_hash(cfg: &LoadedConfig) -> String {
    sha256_hex(cfg.config.to_text().as_bytes())
}

/// Manifest text: hashes, seed, format versions and every resolved key.
pub fn manifest_text(cfg: &LoadedConfig, artifacts: &[&str]) -> String {
    let mut out = String::new();
    out.push_str(&format!("config_sha256 = {}\n", config_hash(cfg)));
    out.push_str(&format!("seed = {}\n", cfg.config.seed));
    out.push_str(&format!("mode = {}\n", cfg.config.mode));
    out.push_str(&format!("dha_version = {}\n", env!("CARGO_PKG_VERSION")));
    out.push_str(&format!("metrics_version = {METRICS_VERSION}\n"));
    out.push_str(&format!("checkpoint_version = {FORMAT_VERSION}\n"));
    for a in artifacts {
        out.push_str(&format!("artifact = {a}\n"));
    }
    out.push_str("\n[config]\n");
    for line in cfg.manifest_lines() {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn write_manifest(cfg: &LoadedConfig, artifacts: &[&str], path: &Path) -> Result<(), ExportError> {
    write_text(path, &manifest_text(cfg, artifacts))
}
