//! The joint training loop.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mode::{PhaseSpec, RunMode, Toggles};
use super::{MetricsRecord, Result, RunSummary, SchedulerError};
use crate::augment::{augment_batch, da_loss_and_grad, update_tau, Catalog, DaPolicy};
use crate::data::{BatchSpec, BatchStream, DataKind, Dataset, StreamState};
use crate::experiment::{EtaSource, RunConfig};
use crate::hpo::{hypergrad, optimizer_step, update_hparams, Bounds, HyperParams};
use crate::nas::{
    child_forward, extract_child_constrained, init_params, relaxed_weights, ArchConfig, ArchState, Binder, Genotype,
    InputKind, IstaConfig, NetSpec, ParamStore,
};
use crate::tensor::{Graph, Tensor, Var};

/// Seeds of the independent random streams.
pub const STREAM_GUMBEL: u64 = 1;
pub const STREAM_AUG: u64 = 2;
pub const STREAM_INIT: u64 = 3;

/// Batch stream tags; distinct tags give distinct batch ids.
pub const TAG_THETA: u32 = 0;
pub const TAG_ETA: u32 = 1;

/// Independent generators for pair sampling, transform randomness and
/// parameter initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct RngStreams {
    pub gumbel: ChaCha8Rng,
    pub aug: ChaCha8Rng,
    pub init: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        RngStreams {
            gumbel: stream(STREAM_GUMBEL),
            aug: stream(STREAM_AUG),
            init: stream(STREAM_INIT),
        }
    }
}

/// Everything that evolves during a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Global iteration, counted across phases.
    pub t: u64,
    pub phase: usize,
    /// Iterations completed in the current phase.
    pub phase_t: u64,
    pub params: ParamStore,
    pub policy: DaPolicy,
    pub hparams: HyperParams,
    pub arch: ArchState,
    pub fixed_genotype: Option<Genotype>,
    pub rngs: RngStreams,
    pub theta_stream: StreamState,
    pub eta_stream: StreamState,
    /// Most recent held-out accuracy, carried between evaluations.
    pub last_holdout: f64,
}

impl TrainState {
    pub fn all_finite(&self) -> bool {
        self.params.all_finite()
            && self.policy.tau().iter().all(|v| v.is_finite())
            && self.hparams.lr.is_finite()
            && self.hparams.wd.is_finite()
            && self
                .arch
                .nodes()
                .iter()
                .all(|n| n.b.iter().chain(&n.alpha).all(|v| v.is_finite()))
    }
}

/// The network spec a config implies for `data`.
pub fn net_spec(cfg: &RunConfig, data: &Dataset) -> NetSpec {
    let input = match data.kind {
        DataKind::Vector => InputKind::Vector { dim: data.input_len() },
        DataKind::Image => InputKind::Image {
            channels: data.shape[0],
            height: data.shape[1],
            width: data.shape[2],
        },
    };
    NetSpec {
        input,
        channels: cfg.channels,
        spatial: cfg.spatial,
        cells: cfg.cells,
        nodes: cfg.nodes,
        num_classes: data.num_classes,
    }
}

pub fn catalog_for(data: &Dataset) -> Catalog {
    match data.kind {
        DataKind::Image => Catalog::Image,
        DataKind::Vector => Catalog::Vector,
    }
}

pub fn arch_config(cfg: &RunConfig) -> ArchConfig {
    ArchConfig {
        ista: IstaConfig {
            lambda: cfg.lambda,
            max_iters: cfg.ista_max_iters,
            tol: cfg.ista_tol,
        },
        compression: cfg.compression,
        ..ArchConfig::default()
    }
}

pub fn initial_hparams(cfg: &RunConfig) -> Result<HyperParams> {
    let bounds = Bounds {
        lr_min: cfg.lr_min,
        lr_max: cfg.lr_max,
        wd_min: cfg.wd_min,
        wd_max: cfg.wd_max,
    };
    Ok(HyperParams::new(cfg.lr, cfg.wd, bounds, cfg.meta_lr)?)
}

/// Fresh state for `seed`: θ and the measurement matrices come from the
/// init stream, in that order.
pub fn initial_state(cfg: &RunConfig, spec: &NetSpec, catalog: Catalog) -> Result<TrainState> {
    let mut rngs = RngStreams::new(cfg.seed);
    let params = init_params(spec, &mut rngs.init);
    let arch = ArchState::init(&spec.space(), &arch_config(cfg), &mut rngs.init)?;
    Ok(TrainState {
        t: 0,
        phase: 0,
        phase_t: 0,
        params,
        policy: DaPolicy::uniform(catalog, cfg.temperature)?,
        hparams: initial_hparams(cfg)?,
        arch,
        fixed_genotype: None,
        rngs,
        theta_stream: StreamState::default(),
        eta_stream: StreamState::default(),
        last_holdout: f64::NAN,
    })
}

/// How retained edges are weighted in the child forward.
#[derive(Clone, Copy)]
enum Weighting<'a> {
    /// Plain sum of the two retained ops (a frozen genotype).
    Plain,
    /// Relaxed weights from the codes; `trainable` makes the codes graph
    /// parameters.
    Relaxed { trainable: bool },
    /// Given per-node edge weights, as constants.
    Fixed(&'a [[f64; 2]]),
}

struct Forward {
    logits: Var,
    /// One `[1, m]` var per node when the codes are trainable.
    codes: Vec<Var>,
    /// Edge weight values used, per node.
    edge_weights: Vec<[f64; 2]>,
}

fn build_forward(
    g: &mut Graph,
    binder: &mut Binder,
    spec: &NetSpec,
    arch: &ArchState,
    genotype: &Genotype,
    weighting: Weighting,
    x: Var,
) -> Result<Forward> {
    let mut codes = Vec::new();
    let mut edge_weights = Vec::new();
    let weights: Option<Vec<Var>> = match weighting {
        Weighting::Plain => None,
        Weighting::Relaxed { trainable } => {
            let mut out = Vec::with_capacity(spec.nodes);
            for (j, node) in arch.nodes().iter().enumerate() {
                let b = Tensor::new(vec![1, node.m()], node.b.clone())?;
                let bv = if trainable { g.param(b) } else { g.constant(b) };
                if trainable {
                    codes.push(bv);
                }
                let w = relaxed_weights(g, bv, &node.a, &node.alpha, &node.e)?;
                let slots = [genotype.nodes[j][0].slot(), genotype.nodes[j][1].slot()];
                let picked = g.gather(w, &slots)?;
                let vals = g.value(picked).data();
                edge_weights.push([vals[0], vals[1]]);
                out.push(picked);
            }
            Some(out)
        }
        Weighting::Fixed(vals) => {
            edge_weights = vals.to_vec();
            Some(vals.iter().map(|w| g.constant(Tensor::vector(w.to_vec()))).collect())
        }
    };
    let logits = child_forward(g, binder, spec, x, genotype, weights.as_deref())?;
    Ok(Forward {
        logits,
        codes,
        edge_weights,
    })
}

fn batch_tensor(spec: &NetSpec, rows: &[&[f64]]) -> Result<Tensor> {
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::new(spec.batch_shape(rows.len()), data)?)
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            best.0 == y
        })
        .count()
}

fn flat_grads(g: &Graph, bound: &[(usize, Var)]) -> Vec<f64> {
    bound.iter().flat_map(|&(_, v)| g.grad_or_zeros(v).into_data()).collect()
}

/// Drives one run: owns the data, the plan and the evolving state.
pub struct Trainer {
    cfg: RunConfig,
    mode: RunMode,
    plan: Vec<PhaseSpec>,
    spec: NetSpec,
    train: Dataset,
    holdout: Dataset,
    theta_batches: BatchStream,
    eta_batches: BatchStream,
    state: TrainState,
    started: Instant,
}

impl Trainer {
    /// A fresh run of `cfg.mode`.
    pub fn new(cfg: &RunConfig, train: Dataset, holdout: Dataset) -> Result<Self> {
        let plan = cfg.mode.phases(cfg.iterations, cfg.phase1());
        Self::with_plan(cfg, cfg.mode, plan, train, holdout)
    }

    /// A fresh run following an explicit phase plan.
    pub fn with_plan(cfg: &RunConfig, mode: RunMode, plan: Vec<PhaseSpec>, train: Dataset, holdout: Dataset) -> Result<Self> {
        let spec = net_spec(cfg, &train);
        let state = initial_state(cfg, &spec, catalog_for(&train))?;
        Self::assemble(cfg, mode, plan, spec, train, holdout, state)
    }

    /// Continues from a saved state.
    pub fn resume(cfg: &RunConfig, train: Dataset, holdout: Dataset, state: TrainState) -> Result<Self> {
        let plan = cfg.mode.phases(cfg.iterations, cfg.phase1());
        let spec = net_spec(cfg, &train);
        Self::assemble(cfg, cfg.mode, plan, spec, train, holdout, state)
    }

    fn assemble(
        cfg: &RunConfig,
        mode: RunMode,
        plan: Vec<PhaseSpec>,
        spec: NetSpec,
        train: Dataset,
        holdout: Dataset,
        state: TrainState,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(SchedulerError::Config("training split is empty".into()));
        }
        if cfg.eta_source == EtaSource::Holdout && holdout.is_empty() {
            return Err(SchedulerError::Config("eta_source = holdout needs a non-empty holdout split".into()));
        }
        let theta_spec = BatchSpec {
            batch_size: cfg.batch_size,
            shuffle_seed: cfg.seed,
            drop_last: false,
        };
        // a different shuffle keeps η batches fresh even on the same split
        let eta_spec = BatchSpec {
            shuffle_seed: cfg.seed ^ 0x9E37_79B9_7F4A_7C15,
            ..theta_spec
        };
        let eta_len = match cfg.eta_source {
            EtaSource::Train => train.len(),
            EtaSource::Holdout => holdout.len(),
        };
        let theta_batches = BatchStream::from_state(theta_spec, TAG_THETA, train.len(), state.theta_stream)?;
        let eta_batches = BatchStream::from_state(eta_spec, TAG_ETA, eta_len, state.eta_stream)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            mode,
            plan,
            spec,
            train,
            holdout,
            theta_batches,
            eta_batches,
            state,
            started: Instant::now(),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn mode(&self) -> RunMode {
        self.mode
    }

    pub fn plan(&self) -> &[PhaseSpec] {
        &self.plan
    }

    pub fn train_data(&self) -> &Dataset {
        &self.train
    }

    pub fn holdout_data(&self) -> &Dataset {
        &self.holdout
    }

    pub fn total_iterations(&self) -> u64 {
        self.plan.iter().map(|p| p.iterations).sum()
    }

    pub fn is_done(&self) -> bool {
        self.state.t >= self.total_iterations()
    }

    /// Genotype the current state implies.
    pub fn genotype(&self) -> Result<Genotype> {
        match &self.state.fixed_genotype {
            Some(g) => Ok(g.clone()),
            None => Ok(extract_child_constrained(
                &self.spec.space(),
                &self.state.arch.alphas(),
                &self.spec,
                self.cfg.param_limit,
            )?),
        }
    }

    fn eval_weighting(&self) -> Weighting<'static> {
        if self.state.fixed_genotype.is_some() {
            Weighting::Plain
        } else {
            Weighting::Relaxed { trainable: false }
        }
    }

    /// Mean loss and accuracy of the current model on `data`, un-augmented.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        self.evaluate_with(&self.state.params, data)
    }

    /// As [`Trainer::evaluate`] with the network weights replaced by `params`.
    pub fn evaluate_with(&self, params: &ParamStore, data: &Dataset) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let geno = self.genotype()?;
        let (mut loss, mut correct) = (0.0, 0usize);
        for chunk in data.samples.chunks(self.cfg.eval_batch) {
            let mut g = Graph::new();
            let mut binder = Binder::new(params, false);
            let rows: Vec<&[f64]> = chunk.iter().map(|s| s.x.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|s| s.y).collect();
            let x = g.constant(batch_tensor(&self.spec, &rows)?);
            let fwd = build_forward(&mut g, &mut binder, &self.spec, &self.state.arch, &geno, self.eval_weighting(), x)?;
            let l = g.softmax_cross_entropy(fwd.logits, &labels)?;
            loss += g.value(l).item()? * chunk.len() as f64;
            correct += accuracy(g.value(fwd.logits), &labels);
        }
        Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
    }

    /// Moves to the next phase once the current one is used up.
    fn enter_due_phases(&mut self) -> Result<()> {
        while self.state.phase + 1 < self.plan.len() && self.state.phase_t >= self.plan[self.state.phase].iterations {
            let genotype = self.genotype()?;
            self.state.phase += 1;
            self.state.phase_t = 0;
            let next = self.plan[self.state.phase];
            if next.fix_genotype {
                log::info!("phase {} fixes genotype {:016x}", self.state.phase, genotype.fingerprint());
                self.state.fixed_genotype = Some(genotype);
            }
            if next.reinit_theta {
                self.state.params = init_params(&self.spec, &mut self.state.rngs.init);
            }
        }
        Ok(())
    }

    /// Toggles in force for this iteration after warm-up and update
    /// frequencies are applied.
    fn effective_toggles(&self) -> Toggles {
        let phase = self.plan[self.state.phase];
        let tog = phase.toggles;
        let pt = self.state.phase_t;
        let live = pt >= self.cfg.warmup;
        Toggles {
            theta: tog.theta,
            apply_da: tog.apply_da,
            tau: tog.tau && live && pt.is_multiple_of(self.cfg.tau_every),
            eta: tog.eta && live && pt.is_multiple_of(self.cfg.eta_every),
            arch: tog.arch && live && self.state.fixed_genotype.is_none() && pt.is_multiple_of(self.cfg.arch_every),
        }
    }

    /// One iteration: augment, extract the child, then update τ, θ, the
    /// codes and η in that order.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let tick = Instant::now();
        self.enter_due_phases()?;
        let t = self.state.t;
        let tog = self.effective_toggles();

        let batch = self.theta_batches.next_batch();
        let labels: Vec<usize> = batch.indices.iter().map(|&i| self.train.samples[i].y).collect();
        let clean: Vec<&[f64]> = batch.indices.iter().map(|&i| self.train.samples[i].x.as_slice()).collect();
        let (inputs, draws) = if tog.apply_da {
            let aug = augment_batch(
                &self.state.policy,
                &clean,
                &self.train.shape,
                &mut self.state.rngs.gumbel,
                &mut self.state.rngs.aug,
            )?;
            (aug.inputs, Some(aug.draws))
        } else {
            (clean.iter().map(|r| r.to_vec()).collect(), None)
        };
        let rows: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();

        let genotype = self.genotype()?;
        let weighting = match self.state.fixed_genotype {
            Some(_) => Weighting::Plain,
            None => Weighting::Relaxed { trainable: tog.arch },
        };

        let mut g = Graph::new();
        let mut binder = Binder::new(&self.state.params, tog.theta);
        let x = g.constant(batch_tensor(&self.spec, &rows)?);
        let fwd = build_forward(&mut g, &mut binder, &self.spec, &self.state.arch, &genotype, weighting, x)?;
        let per_sample = g.softmax_cross_entropy_per_sample(fwd.logits, &labels)?;
        let loss = g.mean(per_sample);
        let loss_value = g.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(SchedulerError::Diverged {
                t,
                what: "training loss".into(),
            });
        }
        g.backward(loss)?;
        let correct = accuracy(g.value(fwd.logits), &labels);
        let bound = binder.bound();

        if tog.tau {
            let draws = draws.as_deref().expect("policy updates imply augmentation");
            let losses = g.value(per_sample).data().to_vec();
            let (_, grad) = da_loss_and_grad(&self.state.policy, draws, &losses, self.cfg.da_weight)?;
            self.state.policy = update_tau(&self.state.policy, &grad, self.cfg.tau_lr, t)?;
        }

        let mut saved = None;
        if tog.theta {
            let idx: Vec<usize> = bound.iter().map(|&(i, _)| i).collect();
            let theta = self.state.params.gather_flat(&idx);
            let grad = flat_grads(&g, &bound);
            let (next, step) = optimizer_step(&theta, &grad, &self.state.hparams, batch.id)?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(SchedulerError::Diverged {
                    t,
                    what: "network weights".into(),
                });
            }
            self.state.params.scatter_flat(&idx, &next);
            saved = Some((idx, step));
        }

        if tog.arch {
            let grads: Vec<Vec<f64>> = fwd.codes.iter().map(|&v| g.grad_or_zeros(v).into_data()).collect();
            self.state.arch.update_b(&grads, self.cfg.arch_lr).map_err(|e| match e {
                crate::nas::NasError::NonFinite { .. } => SchedulerError::Diverged {
                    t,
                    what: format!("architecture recovery ({e})"),
                },
                other => other.into(),
            })?;
        }

        if let (true, Some((idx, step))) = (tog.eta, saved) {
            let eta_batch = self.eta_batches.next_batch();
            let source = match self.cfg.eta_source {
                EtaSource::Train => &self.train,
                EtaSource::Holdout => &self.holdout,
            };
            let rows: Vec<&[f64]> = eta_batch.indices.iter().map(|&i| source.samples[i].x.as_slice()).collect();
            let labels: Vec<usize> = eta_batch.indices.iter().map(|&i| source.samples[i].y).collect();
            let weights = fwd.edge_weights.clone();
            let weighting = match weighting {
                Weighting::Plain => Weighting::Plain,
                _ => Weighting::Fixed(&weights),
            };
            let mut g2 = Graph::new();
            let mut binder2 = Binder::new(&self.state.params, true);
            let x2 = g2.constant(batch_tensor(&self.spec, &rows)?);
            let fwd2 = build_forward(&mut g2, &mut binder2, &self.spec, &self.state.arch, &genotype, weighting, x2)?;
            let l2 = g2.softmax_cross_entropy(fwd2.logits, &labels)?;
            if !g2.value(l2).item()?.is_finite() {
                return Err(SchedulerError::Diverged {
                    t,
                    what: "hyper-parameter batch loss".into(),
                });
            }
            g2.backward(l2)?;
            let bound2 = binder2.bound();
            debug_assert!(bound2.iter().map(|&(i, _)| i).eq(idx.iter().copied()));
            let fresh = flat_grads(&g2, &bound2);
            let hg = hypergrad(&step, &fresh, eta_batch.id)?;
            self.state.hparams = update_hparams(&self.state.hparams, hg)?;
        }

        self.state.t += 1;
        self.state.phase_t += 1;
        self.state.theta_stream = self.theta_batches.state();
        self.state.eta_stream = self.eta_batches.state();
        if !self.state.all_finite() {
            return Err(SchedulerError::Diverged {
                t,
                what: "parameter block".into(),
            });
        }
        if t.is_multiple_of(self.cfg.eval_every) || self.is_done() {
            self.state.last_holdout = self.evaluate(&self.holdout)?.1;
        }
        let top: Vec<(String, f64)> = self
            .state
            .policy
            .top_pairs(3)
            .into_iter()
            .map(|(i, p)| (self.state.policy.catalog().pair_name(i), p))
            .collect();
        Ok(MetricsRecord {
            t,
            train_loss: loss_value,
            train_acc: correct as f64 / labels.len() as f64,
            holdout_acc: self.state.last_holdout,
            lr: self.state.hparams.lr,
            wd: self.state.hparams.wd,
            da_top: top,
            alpha_entropy: self.state.arch.alpha_entropy(),
            child_params: genotype.param_count(&self.spec),
            ms: if self.cfg.wall_time {
                tick.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        })
    }

    /// Runs to the end, handing each record to `sink`.
    pub fn run<F>(&mut self, mut sink: F) -> Result<RunSummary>
    where
        F: FnMut(&MetricsRecord) -> Result<()>,
    {
        self.started = Instant::now();
        while !self.is_done() {
            let rec = self.step()?;
            sink(&rec)?;
        }
        self.summary()
    }

    pub fn summary(&self) -> Result<RunSummary> {
        let genotype = self.genotype()?;
        let (_, train_acc) = self.evaluate(&self.train)?;
        let (_, holdout_acc) = self.evaluate(&self.holdout)?;
        Ok(RunSummary {
            mode: self.mode,
            train_acc,
            holdout_acc,
            iterations: self.state.t,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
            child_params: genotype.param_count(&self.spec),
            genotype,
        })
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }
}
