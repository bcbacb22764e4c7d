//! `dha`: run, ablate, resume, export and probe joint augmentation,
//! hyper-parameter and architecture searches.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dha_core::experiment::{
    checkpoint_load, checkpoint_save, load_config, load_data, manifest_text, model_landscape, sha256_hex,
    write_text, Checkpoint, LoadedConfig, MetricsWriter, Origin, RunConfig,
};
use dha_core::scheduler::{AblationRow, RunMode, RunSummary, SchedulerError, TrainState, Trainer};

/// Exit status when training diverges.
const EXIT_DIVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "dha", version, about = "Joint augmentation, hyper-parameter and architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after this many iterations and leave a checkpoint to resume.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Train several modes on the same seeds and tabulate the results.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated run modes, e.g. `DHA,NasOnly`.
        #[arg(long, value_delimiter = ',', required = true)]
        modes: Vec<String>,
        /// Paired seeds `seed, seed+1, ...` per mode.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss surface around a checkpoint's weights.
    Landscape {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 51)]
        res: usize,
        #[arg(long, default_value_t = 1.0)]
        range: f64,
        /// Seeds of the two directions.
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [1u64, 2u64])]
        direction_seeds: Vec<u64>,
        /// CSV output path; defaults to `landscape.csv` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue a checkpointed run to its configured length.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the genotype, policy and manifest held in a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_config(path: &Path) -> Result<LoadedConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    load_config(&text, std::env::vars()).with_context(|| format!("invalid config {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn summary_line(s: &RunSummary) -> String {
    format!(
        "{}: train_acc={:.4} holdout_acc={:.4} iterations={} child_params={} wall_ms={:.0}",
        s.mode, s.train_acc, s.holdout_acc, s.iterations, s.child_params, s.wall_ms
    )
}

/// Error raised after a divergence dump was written.
#[derive(Debug)]
struct Diverged {
    source: SchedulerError,
    dump: PathBuf,
}

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}; last finite state saved to {}", self.source, self.dump.display())
    }
}

impl std::error::Error for Diverged {}

/// Steps the trainer to `stop` (or the end), streaming metrics. On
/// divergence the last finite state is checkpointed before returning.
fn drive(trainer: &mut Trainer, cfg: &RunConfig, out: &Path, metrics: &mut MetricsWriter, stop: Option<u64>) -> Result<()> {
    let limit = stop.unwrap_or(u64::MAX);
    while !trainer.is_done() && trainer.state().t < limit {
        let snapshot: TrainState = trainer.state().clone();
        match trainer.step() {
            Ok(rec) => metrics.write(&rec)?,
            Err(e @ SchedulerError::Diverged { .. }) => {
                metrics.flush()?;
                let dump = out.join("diverged.ckpt");
                checkpoint_save(
                    &Checkpoint {
                        config: cfg.clone(),
                        state: snapshot,
                    },
                    &dump,
                )?;
                return Err(Diverged { source: e, dump }.into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    metrics.flush()?;
    Ok(())
}

fn write_artifacts(trainer: &Trainer, loaded: &LoadedConfig, out: &Path) -> Result<RunSummary> {
    let state = trainer.state();
    let summary = trainer.summary()?;
    let ckpt = out.join("checkpoint.ckpt");
    checkpoint_save(
        &Checkpoint {
            config: loaded.config.clone(),
            state: state.clone(),
        },
        &ckpt,
    )?;
    let alphas = state.arch.alphas();
    write_text(&out.join("genotype.txt"), &summary.genotype.export_text(&alphas))?;
    write_text(&out.join("policy.txt"), &state.policy.export_text())?;
    let artifacts = ["metrics.csv", "genotype.txt", "policy.txt", "checkpoint.ckpt"];
    write_text(&out.join("manifest.txt"), &manifest_text(loaded, &artifacts))?;
    Ok(summary)
}

fn cmd_run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, stop_at: Option<u64>) -> Result<()> {
    let mut loaded = read_config(config)?;
    if let Some(s) = seed {
        loaded.override_key("seed", &s.to_string(), Origin::Cli("--seed".into()))?;
    }
    if let Some(o) = &out {
        loaded.override_key("out_dir", &o.display().to_string(), Origin::Cli("--out".into()))?;
    }
    let cfg = loaded.config.clone();
    let (train, holdout) = load_data(&cfg).context("loading data")?;
    let mut trainer = Trainer::new(&cfg, train, holdout)?;

    let out = cfg.out_dir.clone();
    ensure_dir(&out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    write_text(&out.join("manifest.txt"), &manifest_text(&loaded, &["metrics.csv"]))?;
    let mut metrics = MetricsWriter::create(&out.join("metrics.csv"))?;
    drive(&mut trainer, &cfg, &out, &mut metrics, stop_at)?;
    let summary = write_artifacts(&trainer, &loaded, &out)?;
    if trainer.is_done() {
        println!("{}", summary_line(&summary));
    } else {
        println!(
            "stopped at iteration {}; resume with: dha resume --checkpoint {}",
            trainer.state().t,
            out.join("checkpoint.ckpt").display()
        );
    }
    Ok(())
}

fn cmd_resume(checkpoint: &Path, out: Option<PathBuf>) -> Result<()> {
    let ck = checkpoint_load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut loaded = load_config(&ck.config.to_text(), Vec::new()).context("checkpoint config")?;
    if let Some(o) = &out {
        loaded.override_key("out_dir", &o.display().to_string(), Origin::Cli("--out".into()))?;
    }
    let cfg = loaded.config.clone();
    let (train, holdout) = load_data(&cfg).context("loading data")?;
    let mut trainer = Trainer::resume(&cfg, train, holdout, ck.state)?;

    let out = cfg.out_dir.clone();
    ensure_dir(&out)?;
    let path = out.join("metrics.csv");
    let mut metrics = if path.exists() {
        MetricsWriter::append(&path)?
    } else {
        MetricsWriter::create(&path)?
    };
    drive(&mut trainer, &cfg, &out, &mut metrics, None)?;
    let summary = write_artifacts(&trainer, &loaded, &out)?;
    println!("{}", summary_line(&summary));
    Ok(())
}

fn cmd_ablate(config: &Path, modes: &[String], seeds: u64, out: Option<PathBuf>) -> Result<()> {
    let mut loaded = read_config(config)?;
    if let Some(o) = &out {
        loaded.override_key("out_dir", &o.display().to_string(), Origin::Cli("--out".into()))?;
    }
    let modes: Vec<RunMode> = modes.iter().map(|m| m.parse()).collect::<Result<_, _>>()?;
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let base = loaded.config.clone();
    let out = base.out_dir.clone();
    ensure_dir(&out)?;

    let mut runs = String::from("mode,seed,train_acc,holdout_acc,wall_ms,iterations\n");
    let mut table = String::from("mode,train_acc,holdout_acc,wall_ms,iterations\n");
    for &mode in &modes {
        let mut rows: Vec<AblationRow> = Vec::new();
        for k in 0..seeds {
            let cfg = RunConfig {
                mode,
                seed: base.seed + k,
                ..base.clone()
            };
            let (train, holdout) = load_data(&cfg)?;
            let row = dha_core::scheduler::run_ablation(mode, &cfg, train, holdout)?;
            runs.push_str(&format!(
                "{},{},{},{},{},{}\n",
                mode, cfg.seed, row.train_acc, row.holdout_acc, row.wall_ms, row.iterations
            ));
            rows.push(row);
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&AblationRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let line = format!(
            "{},{},{},{},{}",
            mode,
            mean(|r| r.train_acc),
            mean(|r| r.holdout_acc),
            mean(|r| r.wall_ms),
            rows[0].iterations
        );
        println!("{line}");
        table.push_str(&line);
        table.push('\n');
    }
    write_text(&out.join("ablation.csv"), &table)?;
    write_text(&out.join("ablation_runs.csv"), &runs)?;
    write_text(
        &out.join("manifest.txt"),
        &manifest_text(&loaded, &["ablation.csv", "ablation_runs.csv"]),
    )?;
    Ok(())
}

fn cmd_landscape(checkpoint: &Path, res: usize, range: f64, seeds: &[u64], out: Option<PathBuf>) -> Result<()> {
    if res == 0 {
        bail!("--res must be at least 1");
    }
    if !(range.is_finite() && range > 0.0) {
        bail!("--range must be finite and positive");
    }
    let ck = checkpoint_load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let loaded = load_config(&ck.config.to_text(), Vec::new())?;
    let cfg = loaded.config.clone();
    let (train, holdout) = load_data(&cfg)?;
    let trainer = Trainer::resume(&cfg, train, holdout, ck.state)?;
    let hash_of = |t: &Trainer| {
        let bytes: Vec<u8> = t.state().params.iter().flat_map(|(_, x)| x.data().iter().flat_map(|v| v.to_le_bytes())).collect();
        sha256_hex(&bytes)
    };
    let before = hash_of(&trainer);
    let grid = model_landscape(&trainer, res, range, (seeds[0], seeds[1]))?;
    if hash_of(&trainer) != before {
        bail!("landscape evaluation changed the network weights");
    }
    let path = out.unwrap_or_else(|| checkpoint.with_file_name("landscape.csv"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_text(&path, &grid.to_csv())?;
    let mut manifest = manifest_text(&loaded, &[&path.display().to_string()]);
    manifest.push_str(&format!(
        "\n[landscape]\ncheckpoint = {}\nresolution = {res}\nrange = {range}\ndirection_seeds = {},{}\ntheta_sha256 = {before}\n",
        checkpoint.display(),
        seeds[0],
        seeds[1]
    ));
    write_text(&path.with_extension("manifest.txt"), &manifest)?;
    let center = grid.at(res / 2, res / 2).map(|v| v.to_string()).unwrap_or_else(|| "missing".into());
    let missing = grid.losses.iter().filter(|l| l.is_none()).count();
    println!("wrote {} ({res}x{res}, center loss {center}, {missing} missing)", path.display());
    Ok(())
}

fn cmd_export(checkpoint: &Path, out: Option<PathBuf>) -> Result<()> {
    let ck = checkpoint_load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let loaded = load_config(&ck.config.to_text(), Vec::new())?;
    let cfg = loaded.config.clone();
    let (train, holdout) = load_data(&cfg)?;
    let trainer = Trainer::resume(&cfg, train, holdout, ck.state)?;
    let dir = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    ensure_dir(&dir)?;
    let genotype = trainer.genotype()?;
    write_text(&dir.join("genotype.txt"), &genotype.export_text(&trainer.state().arch.alphas()))?;
    write_text(&dir.join("policy.txt"), &trainer.state().policy.export_text())?;
    let mut manifest = manifest_text(&loaded, &["genotype.txt", "policy.txt"]);
    manifest.push_str(&format!("\n[export]\ncheckpoint = {}\niteration = {}\n", checkpoint.display(), trainer.state().t));
    write_text(&dir.join("manifest.txt"), &manifest)?;
    println!("exported genotype and policy at iteration {} to {}", trainer.state().t, dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DHA_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            stop_at,
        } => cmd_run(&config, seed, out, stop_at),
        Command::Ablate {
            config,
            modes,
            seeds,
            out,
        } => cmd_ablate(&config, &modes, seeds, out),
        Command::Landscape {
            checkpoint,
            res,
            range,
            direction_seeds,
            out,
        } => cmd_landscape(&checkpoint, res, range, &direction_seeds, out),
        Command::Resume { checkpoint, out } => cmd_resume(&checkpoint, out),
        Command::Export { checkpoint, out } => cmd_export(&checkpoint, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Diverged>().is_some() {
                ExitCode::from(EXIT_DIVERGED)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
