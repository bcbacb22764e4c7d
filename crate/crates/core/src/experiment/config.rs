//! Line-oriented `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::augment::WeightMode;
use crate::scheduler::RunMode;

/// Where a configuration error came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Env(String),
    /// A command-line flag.
    Cli(String),
    Default,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Env(var) => write!(f, "environment variable {var}"),
            Origin::Cli(flag) => write!(f, "command-line flag {flag}"),
            Origin::Default => f.write_str("default"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{origin}: expected `key = value`, got {text:?}")]
    Syntax { origin: Origin, text: String },
    #[error("{origin}: unknown key {key:?}")]
    UnknownKey { key: String, origin: Origin },
    #[error("{origin}: key {key:?} expects {expected}, got {value:?}")]
    Type {
        key: String,
        origin: Origin,
        expected: &'static str,
        value: String,
    },
    #[error("{origin}: key {key:?} out of range: {msg}")]
    Range { key: String, origin: Origin, msg: String },
    #[error("{origin}: key {key:?} given twice")]
    Duplicate { key: String, origin: Origin },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetSource {
    Blobs,
    Moons,
    Csv,
    Idx,
}

impl DatasetSource {
    pub fn name(self) -> &'static str {
        match self {
            DatasetSource::Blobs => "blobs",
            DatasetSource::Moons => "moons",
            DatasetSource::Csv => "csv",
            DatasetSource::Idx => "idx",
        }
    }
}

impl FromStr for DatasetSource {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.to_ascii_lowercase().as_str() {
            "blobs" => Ok(DatasetSource::Blobs),
            "moons" => Ok(DatasetSource::Moons),
            "csv" => Ok(DatasetSource::Csv),
            "idx" => Ok(DatasetSource::Idx),
            _ => Err(()),
        }
    }
}

/// Batches used for the hyper-parameter update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EtaSource {
    /// Fresh batches from the training split.
    Train,
    /// Batches from the held-out split.
    Holdout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: RunMode,
    pub dataset: DatasetSource,
    pub data_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    /// Defaults to the last column.
    pub label_column: Option<usize>,
    pub has_header: bool,
    pub samples: usize,
    pub classes: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub holdout_fraction: f64,
    pub channels: usize,
    pub cells: usize,
    pub nodes: usize,
    pub spatial: usize,
    pub iterations: u64,
    /// Defaults to half of `iterations`.
    pub phase1_iterations: Option<u64>,
    pub warmup: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub wd: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub wd_min: f64,
    pub wd_max: f64,
    pub meta_lr: f64,
    pub tau_lr: f64,
    pub arch_lr: f64,
    pub temperature: f64,
    pub da_weight: WeightMode,
    pub lambda: f64,
    pub compression: f64,
    pub ista_max_iters: usize,
    pub ista_tol: f64,
    pub param_limit: Option<usize>,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_batch: usize,
    pub eta_source: EtaSource,
    pub tau_every: u64,
    pub eta_every: u64,
    pub arch_every: u64,
    pub wall_time: bool,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: RunMode::Dha,
            dataset: DatasetSource::Blobs,
            data_path: None,
            labels_path: None,
            label_column: None,
            has_header: false,
            samples: 500,
            classes: 2,
            noise: 0.1,
            data_seed: 0,
            holdout_fraction: 0.2,
            channels: 4,
            cells: 1,
            nodes: 4,
            spatial: 2,
            iterations: 2000,
            phase1_iterations: None,
            warmup: 200,
            batch_size: 32,
            lr: 0.05,
            wd: 3e-4,
            lr_min: 1e-5,
            lr_max: 1.0,
            wd_min: 0.0,
            wd_max: 0.1,
            meta_lr: 1e-3,
            tau_lr: 0.1,
            arch_lr: 0.1,
            temperature: 1.0,
            da_weight: WeightMode::Softmax,
            lambda: 1e-4,
            compression: 0.5,
            ista_max_iters: 2000,
            ista_tol: 1e-10,
            param_limit: None,
            seed: 0,
            eval_every: 50,
            eval_batch: 256,
            eta_source: EtaSource::Train,
            tau_every: 1,
            eta_every: 1,
            arch_every: 1,
            wall_time: false,
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

/// Every recognised key, in serialization order.
pub const KEYS: &[&str] = &[
    "mode",
    "dataset",
    "data_path",
    "labels_path",
    "label_column",
    "has_header",
    "samples",
    "classes",
    "noise",
    "data_seed",
    "holdout_fraction",
    "channels",
    "cells",
    "nodes",
    "spatial",
    "iterations",
    "phase1_iterations",
    "warmup",
    "batch_size",
    "lr",
    "wd",
    "lr_min",
    "lr_max",
    "wd_min",
    "wd_max",
    "meta_lr",
    "tau_lr",
    "arch_lr",
    "temperature",
    "da_weight",
    "lambda",
    "compression",
    "ista_max_iters",
    "ista_tol",
    "param_limit",
    "seed",
    "eval_every",
    "eval_batch",
    "eta_source",
    "tau_every",
    "eta_every",
    "arch_every",
    "wall_time",
    "out_dir",
];

fn parse_as<T: FromStr>(key: &str, value: &str, origin: &Origin, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Type {
        key: key.to_string(),
        origin: origin.clone(),
        expected,
        value: value.to_string(),
    })
}

fn parse_bool(key: &str, value: &str, origin: &Origin) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::Type {
            key: key.to_string(),
            origin: origin.clone(),
            expected: "a boolean",
            value: value.to_string(),
        }),
    }
}

fn opt_str<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

impl RunConfig {
    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str, origin: &Origin) -> Result<(), ConfigError> {
        let int = "an integer";
        let uint = "a non-negative integer";
        let real = "a number";
        match key {
            "mode" => {
                self.mode = value.parse().map_err(|_| ConfigError::Type {
                    key: key.into(),
                    origin: origin.clone(),
                    expected: "a run mode",
                    value: value.into(),
                })?
            }
            "dataset" => {
                self.dataset = value.parse().map_err(|_| ConfigError::Type {
                    key: key.into(),
                    origin: origin.clone(),
                    expected: "one of blobs, moons, csv, idx",
                    value: value.into(),
                })?
            }
            "data_path" => self.data_path = Some(PathBuf::from(value)),
            "labels_path" => self.labels_path = Some(PathBuf::from(value)),
            "label_column" => self.label_column = Some(parse_as(key, value, origin, uint)?),
            "has_header" => self.has_header = parse_bool(key, value, origin)?,
            "samples" => self.samples = self.signed_usize(key, value, origin)?,
            "classes" => self.classes = self.signed_usize(key, value, origin)?,
            "noise" => self.noise = parse_as(key, value, origin, real)?,
            "data_seed" => self.data_seed = parse_as(key, value, origin, uint)?,
            "holdout_fraction" => self.holdout_fraction = parse_as(key, value, origin, real)?,
            "channels" => self.channels = self.signed_usize(key, value, origin)?,
            "cells" => self.cells = self.signed_usize(key, value, origin)?,
            "nodes" => self.nodes = self.signed_usize(key, value, origin)?,
            "spatial" => self.spatial = self.signed_usize(key, value, origin)?,
            "iterations" => self.iterations = self.signed_usize(key, value, origin)? as u64,
            "phase1_iterations" => self.phase1_iterations = Some(self.signed_usize(key, value, origin)? as u64),
            "warmup" => self.warmup = self.signed_usize(key, value, origin)? as u64,
            "batch_size" => self.batch_size = self.signed_usize(key, value, origin)?,
            "lr" => self.lr = parse_as(key, value, origin, real)?,
            "wd" => self.wd = parse_as(key, value, origin, real)?,
            "lr_min" => self.lr_min = parse_as(key, value, origin, real)?,
            "lr_max" => self.lr_max = parse_as(key, value, origin, real)?,
            "wd_min" => self.wd_min = parse_as(key, value, origin, real)?,
            "wd_max" => self.wd_max = parse_as(key, value, origin, real)?,
            "meta_lr" => self.meta_lr = parse_as(key, value, origin, real)?,
            "tau_lr" => self.tau_lr = parse_as(key, value, origin, real)?,
            "arch_lr" => self.arch_lr = parse_as(key, value, origin, real)?,
            "temperature" => self.temperature = parse_as(key, value, origin, real)?,
            "da_weight" => {
                self.da_weight = match value.to_ascii_lowercase().as_str() {
                    "softmax" => WeightMode::Softmax,
                    "relaxed" => WeightMode::Relaxed,
                    _ => {
                        return Err(ConfigError::Type {
                            key: key.into(),
                            origin: origin.clone(),
                            expected: "softmax or relaxed",
                            value: value.into(),
                        })
                    }
                }
            }
            "lambda" => self.lambda = parse_as(key, value, origin, real)?,
            "compression" => self.compression = parse_as(key, value, origin, real)?,
            "ista_max_iters" => self.ista_max_iters = self.signed_usize(key, value, origin)?,
            "ista_tol" => self.ista_tol = parse_as(key, value, origin, real)?,
            "param_limit" => self.param_limit = Some(self.signed_usize(key, value, origin)?),
            "seed" => self.seed = parse_as(key, value, origin, uint)?,
            "eval_every" => self.eval_every = self.signed_usize(key, value, origin)? as u64,
            "eval_batch" => self.eval_batch = self.signed_usize(key, value, origin)?,
            "eta_source" => {
                self.eta_source = match value.to_ascii_lowercase().as_str() {
                    "train" => EtaSource::Train,
                    "holdout" => EtaSource::Holdout,
                    _ => {
                        return Err(ConfigError::Type {
                            key: key.into(),
                            origin: origin.clone(),
                            expected: "train or holdout",
                            value: value.into(),
                        })
                    }
                }
            }
            "tau_every" => self.tau_every = self.signed_usize(key, value, origin)? as u64,
            "eta_every" => self.eta_every = self.signed_usize(key, value, origin)? as u64,
            "arch_every" => self.arch_every = self.signed_usize(key, value, origin)? as u64,
            "wall_time" => self.wall_time = parse_bool(key, value, origin)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => {
                let _ = int;
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    origin: origin.clone(),
                });
            }
        }
        Ok(())
    }

    /// Integers that may be written negative, so that `-1` is reported as a
    /// range error rather than a type error.
    fn signed_usize(&self, key: &str, value: &str, origin: &Origin) -> Result<usize, ConfigError> {
        let v: i128 = parse_as(key, value, origin, "an integer")?;
        usize::try_from(v).map_err(|_| ConfigError::Range {
            key: key.to_string(),
            origin: origin.clone(),
            msg: format!("must be non-negative, got {v}"),
        })
    }

    /// Current value of `key` in serialized form; `None` for unset options.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "mode" => self.mode.to_string(),
            "dataset" => self.dataset.name().to_string(),
            "data_path" => return self.data_path.as_ref().map(|p| p.display().to_string()),
            "labels_path" => return self.labels_path.as_ref().map(|p| p.display().to_string()),
            "label_column" => return opt_str(&self.label_column),
            "has_header" => self.has_header.to_string(),
            "samples" => self.samples.to_string(),
            "classes" => self.classes.to_string(),
            "noise" => self.noise.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "holdout_fraction" => self.holdout_fraction.to_string(),
            "channels" => self.channels.to_string(),
            "cells" => self.cells.to_string(),
            "nodes" => self.nodes.to_string(),
            "spatial" => self.spatial.to_string(),
            "iterations" => self.iterations.to_string(),
            "phase1_iterations" => return opt_str(&self.phase1_iterations),
            "warmup" => self.warmup.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "wd" => self.wd.to_string(),
            "lr_min" => self.lr_min.to_string(),
            "lr_max" => self.lr_max.to_string(),
            "wd_min" => self.wd_min.to_string(),
            "wd_max" => self.wd_max.to_string(),
            "meta_lr" => self.meta_lr.to_string(),
            "tau_lr" => self.tau_lr.to_string(),
            "arch_lr" => self.arch_lr.to_string(),
            "temperature" => self.temperature.to_string(),
            "da_weight" => match self.da_weight {
                WeightMode::Softmax => "softmax".into(),
                WeightMode::Relaxed => "relaxed".into(),
            },
            "lambda" => self.lambda.to_string(),
            "compression" => self.compression.to_string(),
            "ista_max_iters" => self.ista_max_iters.to_string(),
            "ista_tol" => self.ista_tol.to_string(),
            "param_limit" => return opt_str(&self.param_limit),
            "seed" => self.seed.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_batch" => self.eval_batch.to_string(),
            "eta_source" => match self.eta_source {
                EtaSource::Train => "train".into(),
                EtaSource::Holdout => "holdout".into(),
            },
            "tau_every" => self.tau_every.to_string(),
            "eta_every" => self.eta_every.to_string(),
            "arch_every" => self.arch_every.to_string(),
            "wall_time" => self.wall_time.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Every key with a value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(v) = self.get(key) {
                out.push_str(&format!("{key} = {v}\n"));
            }
        }
        out
    }

    /// Checks numeric ranges; `origins` locates each key for error messages.
    pub fn validate(&self, origins: &BTreeMap<String, Origin>) -> Result<(), ConfigError> {
        let range = |key: &str, msg: String| ConfigError::Range {
            key: key.to_string(),
            origin: origins.get(key).cloned().unwrap_or(Origin::Default),
            msg,
        };
        let positive_usize = [
            ("samples", self.samples),
            ("classes", self.classes),
            ("channels", self.channels),
            ("cells", self.cells),
            ("nodes", self.nodes),
            ("spatial", self.spatial),
            ("batch_size", self.batch_size),
            ("ista_max_iters", self.ista_max_iters),
            ("eval_batch", self.eval_batch),
        ];
        for (key, v) in positive_usize {
            if v == 0 {
                return Err(range(key, "must be at least 1".into()));
            }
        }
        for (key, v) in [
            ("eval_every", self.eval_every),
            ("tau_every", self.tau_every),
            ("eta_every", self.eta_every),
            ("arch_every", self.arch_every),
        ] {
            if v == 0 {
                return Err(range(key, "must be at least 1".into()));
            }
        }
        if self.classes < 2 {
            return Err(range("classes", format!("need at least 2, got {}", self.classes)));
        }
        if matches!(self.dataset, DatasetSource::Blobs | DatasetSource::Moons) && self.samples < 2 {
            return Err(range("samples", "synthetic data needs at least 2 samples".into()));
        }
        if self.dataset == DatasetSource::Moons && self.classes != 2 {
            return Err(range("classes", "moons has exactly 2 classes".into()));
        }
        let reals = [
            ("noise", self.noise),
            ("lr", self.lr),
            ("wd", self.wd),
            ("lr_min", self.lr_min),
            ("lr_max", self.lr_max),
            ("wd_min", self.wd_min),
            ("wd_max", self.wd_max),
            ("meta_lr", self.meta_lr),
            ("tau_lr", self.tau_lr),
            ("arch_lr", self.arch_lr),
            ("temperature", self.temperature),
            ("lambda", self.lambda),
            ("ista_tol", self.ista_tol),
        ];
        for (key, v) in reals {
            if !v.is_finite() || v < 0.0 {
                return Err(range(key, format!("must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(range("holdout_fraction", format!("must lie in [0, 1), got {}", self.holdout_fraction)));
        }
        if !(self.compression > 0.0 && self.compression < 1.0) {
            return Err(range("compression", format!("must lie in (0, 1), got {}", self.compression)));
        }
        if self.temperature == 0.0 {
            return Err(range("temperature", "must be positive".into()));
        }
        if self.meta_lr == 0.0 {
            return Err(range("meta_lr", "must be positive".into()));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(range("lr_min", format!("need 0 < lr_min <= lr_max, got [{}, {}]", self.lr_min, self.lr_max)));
        }
        if self.wd_min > self.wd_max {
            return Err(range("wd_min", format!("need wd_min <= wd_max, got [{}, {}]", self.wd_min, self.wd_max)));
        }
        if !(self.lr_min..=self.lr_max).contains(&self.lr) {
            return Err(range("lr", format!("must lie in [{}, {}], got {}", self.lr_min, self.lr_max, self.lr)));
        }
        if !(self.wd_min..=self.wd_max).contains(&self.wd) {
            return Err(range("wd", format!("must lie in [{}, {}], got {}", self.wd_min, self.wd_max, self.wd)));
        }
        if let Some(p1) = self.phase1_iterations {
            if p1 > self.iterations {
                return Err(range("phase1_iterations", format!("exceeds iterations ({})", self.iterations)));
            }
        }
        match self.dataset {
            DatasetSource::Csv => self.require_path("data_path", &self.data_path, origins)?,
            DatasetSource::Idx => {
                self.require_path("data_path", &self.data_path, origins)?;
                self.require_path("labels_path", &self.labels_path, origins)?;
            }
            _ => {}
        }
        Ok(())
    }

    fn require_path(&self, key: &str, path: &Option<PathBuf>, origins: &BTreeMap<String, Origin>) -> Result<(), ConfigError> {
        let origin = origins.get(key).cloned().unwrap_or(Origin::Default);
        match path {
            None => Err(ConfigError::Range {
                key: key.to_string(),
                origin,
                msg: format!("required for dataset = {}", self.dataset.name()),
            }),
            Some(p) if !p.exists() => Err(ConfigError::Range {
                key: key.to_string(),
                origin,
                msg: format!("{} does not exist", p.display()),
            }),
            Some(_) => Ok(()),
        }
    }

    /// Iterations of the first phase for two-phase modes.
    pub fn phase1(&self) -> u64 {
        self.phase1_iterations.unwrap_or(self.iterations / 2)
    }
}

/// A validated config plus where each key's value came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub origins: BTreeMap<String, Origin>,
}

impl LoadedConfig {
    /// Applies one override on top of the loaded values and re-validates.
    pub fn override_key(&mut self, key: &str, value: &str, origin: Origin) -> Result<(), ConfigError> {
        let mut next = self.config.clone();
        next.set(key, value, &origin)?;
        let mut origins = self.origins.clone();
        origins.insert(key.to_string(), origin);
        next.validate(&origins)?;
        self.config = next;
        self.origins = origins;
        Ok(())
    }

    /// `key = value  # source` for every key, defaults included.
    pub fn manifest_lines(&self) -> Vec<String> {
        KEYS.iter()
            .map(|key| {
                let value = self.config.get(key).unwrap_or_else(|| "(unset)".into());
                let source = match self.origins.get(*key) {
                    Some(Origin::Line(n)) => format!("config line {n}"),
                    Some(Origin::Env(v)) => format!("env {v}"),
                    Some(Origin::Cli(flag)) => format!("flag {flag}"),
                    _ => "default".into(),
                };
                format!("{key} = {value}  # {source}")
            })
            .collect()
    }
}

fn parse_lines(text: &str, cfg: &mut RunConfig, origins: &mut BTreeMap<String, Origin>) -> Result<(), ConfigError> {
    for (i, raw) in text.lines().enumerate() {
        let origin = Origin::Line(i + 1);
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                origin,
                text: raw.to_string(),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                origin,
                text: raw.to_string(),
            });
        }
        if origins.contains_key(key) {
            return Err(ConfigError::Duplicate {
                key: key.to_string(),
                origin,
            });
        }
        cfg.set(key, value, &origin)?;
        origins.insert(key.to_string(), origin);
    }
    Ok(())
}

/// Parses and validates config text without environment overrides.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    load_config(text, std::iter::empty::<(String, String)>()).map(|l| l.config)
}

/// Parses config text, then applies `DHA_<UPPER_KEY>` overrides from `env`,
/// then validates.
pub fn load_config<I>(text: &str, env: I) -> Result<LoadedConfig, ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut config = RunConfig::default();
    let mut origins = BTreeMap::new();
    parse_lines(text, &mut config, &mut origins)?;
    let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with("DHA_")).collect();
    overrides.sort();
    for (var, value) in overrides {
        let key = var["DHA_".len()..].to_ascii_lowercase();
        if key == "log" {
            continue;
        }
        let origin = Origin::Env(var.clone());
        config.set(&key, value.trim(), &origin)?;
        origins.insert(key, origin);
    }
    config.validate(&origins)?;
    Ok(LoadedConfig { config, origins })
}
