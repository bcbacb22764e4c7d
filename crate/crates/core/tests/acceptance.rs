//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Every reference value is computed here, independently of the
//! library code under test.

use std::time::Instant;

use dha_core::augment::{da_loss_and_grad, sample_pairs, update_tau, Catalog, DaPolicy, PairDraw, WeightMode};
use dha_core::data::BatchId;
use dha_core::experiment::{
    export_metrics, from_bytes, landscape, load_data, metrics_row, to_bytes, Checkpoint,
};
use dha_core::hpo::{hypergrad, optimizer_step, Bounds, HyperParams};
use dha_core::nas::{
    child_forward, init_measurement, init_params, ista_recover, lipschitz_constant, relaxed_node_output,
    soft_threshold, supernet_forward, Binder, CellOp, CellSpace, Edge, Genotype, InputKind, IstaConfig, NetSpec,
    ParamStore,
};
use dha_core::scheduler::{run_ablation, AblationRow, MetricsRecord};
use dha_core::tensor::{central_difference, ConvConfig, PoolKind};
use dha_core::{Graph, RunConfig, RunMode, Tensor, TensorError, Trainer, Var};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = (usize, &'static str, fn() -> Outcome);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-12)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so relu kinks sit far from every probe.
fn off_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, 0.1, 1.0, r);
    for v in t.data_mut() {
        if r.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Distinct values at least 0.05 apart, so max-pool winners never swap.
fn distinct(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 0.4).collect();
    v.shuffle(r);
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn gaussian(m: usize, n: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let normal = rand_distr::Normal::new(0.0, 1.0 / (m as f64).sqrt()).unwrap();
    DMatrix::from_fn(m, n, |_, _| rand_distr::Distribution::sample(&normal, r))
}

// ---------------------------------------------------------------- criterion 1

type GraphFn = dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>;
type OpCase = (&'static str, Box<GraphFn>, Vec<Tensor>);

/// Reduces `out` to a scalar through a fixed random projection, which gives
/// every output coordinate an O(1) weight.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(uniform(&shape, 0.5, 1.5, &mut rng(seed)));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn op_cases() -> Vec<OpCase> {
    let mut r = rng(11);
    let mut cases: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, |$g:ident, $v:ident| $body:expr) => {
            cases.push((
                $name,
                Box::new(move |$g: &mut Graph, $v: &[Var]| {
                    let out: Var = $body;
                    project($g, out, 99)
                }),
                $inputs,
            ))
        };
    }
    let m23 = |r: &mut ChaCha8Rng| uniform(&[2, 3], -1.0, 1.0, r);
    case!("add", vec![m23(&mut r), m23(&mut r)], |g, v| g.add(v[0], v[1])?);
    case!("add_broadcast", vec![m23(&mut r), uniform(&[], -1.0, 1.0, &mut r)], |g, v| g.add(v[0], v[1])?);
    case!("sub", vec![m23(&mut r), m23(&mut r)], |g, v| g.sub(v[0], v[1])?);
    case!("mul", vec![m23(&mut r), m23(&mut r)], |g, v| g.mul(v[0], v[1])?);
    case!("mul_broadcast", vec![uniform(&[], -1.0, 1.0, &mut r), m23(&mut r)], |g, v| g.mul(v[0], v[1])?);
    case!("scale", vec![m23(&mut r)], |g, v| g.scale(v[0], -1.7));
    case!("matmul", vec![m23(&mut r), uniform(&[3, 4], -1.0, 1.0, &mut r)], |g, v| g.matmul(v[0], v[1])?);
    case!("transpose", vec![m23(&mut r)], |g, v| g.transpose(v[0])?);
    case!("reshape", vec![m23(&mut r)], |g, v| g.reshape(v[0], &[3, 2])?);
    case!("relu", vec![off_zero(&[2, 3], &mut r)], |g, v| g.relu(v[0]));
    case!(
        "bias_add",
        vec![uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r), uniform(&[3], -1.0, 1.0, &mut r)],
        |g, v| g.bias_add(v[0], v[1])?
    );
    case!(
        "affine",
        vec![
            uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r),
            uniform(&[3], 0.5, 1.5, &mut r),
            uniform(&[3], -1.0, 1.0, &mut r)
        ],
        |g, v| g.affine(v[0], v[1], v[2])?
    );
    case!(
        "conv2d_same",
        vec![uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut r), uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r)],
        |g, v| g.conv2d(v[0], v[1], ConvConfig::same(3, 1))?
    );
    case!(
        "conv2d_dilated_depthwise",
        vec![uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut r), uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r)],
        |g, v| g.conv2d(v[0], v[1], ConvConfig::same(3, 2).with_groups(2))?
    );
    case!(
        "conv2d_strided",
        vec![uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut r), uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r)],
        |g, v| g.conv2d(v[0], v[1], ConvConfig::same(3, 1).with_stride(2))?
    );
    case!(
        "conv2d_wide_kernel",
        vec![uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut r), uniform(&[2, 1, 5, 5], -1.0, 1.0, &mut r)],
        |g, v| g.conv2d(v[0], v[1], ConvConfig::same(5, 1).with_groups(2))?
    );
    case!(
        "conv2d_wide_dilated",
        vec![uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut r), uniform(&[2, 1, 5, 5], -1.0, 1.0, &mut r)],
        |g, v| g.conv2d(v[0], v[1], ConvConfig::same(5, 2).with_groups(2))?
    );
    case!("max_pool", vec![distinct(&[2, 2, 4, 4], &mut r)], |g, v| g.pool3x3(v[0], PoolKind::Max, 1)?);
    case!("max_pool_strided", vec![distinct(&[1, 2, 5, 5], &mut r)], |g, v| g.pool3x3(v[0], PoolKind::Max, 2)?);
    case!("avg_pool", vec![uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut r)], |g, v| g.pool3x3(v[0], PoolKind::Avg, 1)?);
    case!("global_avg_pool", vec![uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut r)], |g, v| g.global_avg_pool(v[0])?);
    case!("sum", vec![m23(&mut r)], |g, v| {
        let s = g.sum(v[0]);
        g.mul(s, s)?
    });
    case!("mean", vec![m23(&mut r)], |g, v| {
        let s = g.mean(v[0]);
        g.mul(s, s)?
    });
    case!("softmax", vec![uniform(&[5], -2.0, 2.0, &mut r)], |g, v| g.softmax(v[0])?);
    case!("gather", vec![uniform(&[5], -1.0, 1.0, &mut r)], |g, v| g.gather(v[0], &[4, 0, 4, 2])?);
    case!("softmax_cross_entropy", vec![uniform(&[4, 3], -2.0, 2.0, &mut r)], |g, v| {
        g.softmax_cross_entropy(v[0], &[0, 2, 1, 2])?
    });
    case!("softmax_cross_entropy_per_sample", vec![uniform(&[4, 3], -2.0, 2.0, &mut r)], |g, v| {
        g.softmax_cross_entropy_per_sample(v[0], &[1, 1, 0, 2])?
    });
    case!(
        "weighted_sum",
        vec![uniform(&[3], -1.0, 1.0, &mut r), m23(&mut r), m23(&mut r), m23(&mut r)],
        |g, v| g.weighted_sum(v[0], &v[1..])?
    );
    cases
}

/// Worst relative error of reverse-mode gradients against central
/// differences, coordinate by coordinate.
fn graph_fd_error(f: &GraphFn, params: &[Tensor], step: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars).unwrap();
    g.backward(loss).unwrap();
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, v) in vars.iter().enumerate() {
        let grad = g.grad_or_zeros(*v);
        for j in 0..params[pi].numel() {
            let numeric = central_difference(&f, &mut work, pi, j, step).unwrap();
            worst = worst.max(rel_err(grad.data()[j], numeric));
        }
    }
    worst
}

fn micro_loss(spec: &NetSpec, store: &ParamStore, weights: &[Tensor], x: &Tensor, y: &[usize]) -> MicroEval {
    let mut g = Graph::new();
    let mut b = Binder::new(store, true);
    let xv = g.constant(x.clone());
    let wv: Vec<Var> = weights.iter().map(|w| g.param(w.clone())).collect();
    let logits = supernet_forward(&mut g, &mut b, spec, xv, &wv).unwrap();
    let loss = g.softmax_cross_entropy(logits, y).unwrap();
    let value = g.value(loss).item().unwrap();
    let margin = g.kink_margin();
    g.backward(loss).unwrap();
    let mut grads: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    for (i, v) in b.bound() {
        grads[i] = g.grad_or_zeros(v);
    }
    let wgrads = wv.iter().map(|&v| g.grad_or_zeros(v)).collect();
    MicroEval { value, grads, wgrads, margin }
}

struct MicroEval {
    value: f64,
    grads: Vec<Tensor>,
    wgrads: Vec<Tensor>,
    margin: f64,
}

/// Central differences are only an oracle where the loss is differentiable
/// across the whole probe interval, so evaluation points with a relu input
/// or a max-pool gap closer than this to a kink are redrawn.
const KINK_MARGIN: f64 = 1e-3;

/// Finite-difference check of the full relaxed supernet loss with respect
/// to every weight and every mixing coefficient. Returns the worst error
/// and the number of evaluation points rejected for sitting near a kink.
fn micro_supernet_error(spec: NetSpec, seed: u64, step: f64) -> (f64, usize) {
    let mut r = rng(seed);
    let n = 3;
    let y: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    let space = spec.space();
    let mut rejected = 0;
    let (mut store, weights, x, at) = loop {
        let mut store = init_params(&spec, &mut r);
        // every shift starts at zero; spread them so relus see generic inputs
        for i in 0..store.len() {
            let name = store.name(i);
            if name.contains(".h") || name.ends_with("shift") || name.ends_with(".b") {
                for v in store.tensor_mut(i).data_mut() {
                    *v = r.random_range(-0.3..0.3);
                }
            }
        }
        let weights: Vec<Tensor> = (0..spec.nodes).map(|j| uniform(&[space.slots(j)], 0.1, 1.0, &mut r)).collect();
        let x = uniform(&spec.batch_shape(n), -1.0, 1.0, &mut r);
        let at = micro_loss(&spec, &store, &weights, &x, &y);
        if at.margin >= KINK_MARGIN || rejected == 50 {
            break (store, weights, x, at);
        }
        rejected += 1;
    };

    let mut worst = 0.0f64;
    let eval = |s: &ParamStore, w: &[Tensor]| micro_loss(&spec, s, w, &x, &y).value;
    for i in 0..store.len() {
        for j in 0..store.tensor(i).numel() {
            let orig = store.tensor(i).data()[j];
            store.tensor_mut(i).data_mut()[j] = orig + step;
            let plus = eval(&store, &weights);
            store.tensor_mut(i).data_mut()[j] = orig - step;
            let minus = eval(&store, &weights);
            store.tensor_mut(i).data_mut()[j] = orig;
            worst = worst.max(rel_err(at.grads[i].data()[j], (plus - minus) / (2.0 * step)));
        }
    }
    let mut w = weights.clone();
    for k in 0..w.len() {
        for j in 0..w[k].numel() {
            let orig = w[k].data()[j];
            w[k].data_mut()[j] = orig + step;
            let plus = eval(&store, &w);
            w[k].data_mut()[j] = orig - step;
            let minus = eval(&store, &w);
            w[k].data_mut()[j] = orig;
            worst = worst.max(rel_err(at.wgrads[k].data()[j], (plus - minus) / (2.0 * step)));
        }
    }
    (worst, rejected)
}

fn criterion_1() -> Outcome {
    const TOL: f64 = 1e-4;
    const STEP: f64 = 1e-4;
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (name, f, inputs) in op_cases() {
        let e = graph_fd_error(f.as_ref(), &inputs, STEP);
        worst = worst.max(e);
        if e.is_nan() || e >= TOL {
            failures.push(format!("{name}={e:.2e}"));
        }
    }
    let vector = NetSpec {
        input: InputKind::Vector { dim: 3 },
        channels: 2,
        spatial: 3,
        cells: 2,
        nodes: 2,
        num_classes: 3,
    };
    let image = NetSpec {
        input: InputKind::Image {
            channels: 1,
            height: 4,
            width: 4,
        },
        channels: 2,
        spatial: 4,
        cells: 1,
        nodes: 2,
        num_classes: 2,
    };
    let mut redrawn = Vec::new();
    for (name, spec) in [("micro_supernet_vector", vector), ("micro_supernet_image", image)] {
        let (e, rejected) = micro_supernet_error(spec, 5, STEP);
        redrawn.push(format!("{name} {rejected}"));
        worst = worst.max(e);
        if e.is_nan() || e >= TOL {
            failures.push(format!("{name}={e:.2e}"));
        }
    }
    if failures.is_empty() {
        Ok(format!(
            "worst relative error {worst:.2e} (< {TOL:e}); points redrawn for kink margin < {KINK_MARGIN:e}: {}",
            redrawn.join(", ")
        ))
    } else {
        Err(format!("over tolerance: {}", failures.join(", ")))
    }
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    const TOL: f64 = 1e-6;
    let mut r = rng(22);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = r.random_range(2..8);
        let sym = |r: &mut ChaCha8Rng| {
            let m = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
            &m * m.transpose() + DMatrix::identity(d, d) * 0.1
        };
        // training loss ½θᵀHθ + cᵀθ, fresh loss ½θᵀH′θ + c′ᵀθ
        let (h, hf) = (sym(&mut r), sym(&mut r));
        let c = DVector::from_fn(d, |_, _| r.random_range(-1.0..1.0));
        let cf = DVector::from_fn(d, |_, _| r.random_range(-1.0..1.0));
        let theta = DVector::from_fn(d, |_, _| r.random_range(-1.0..1.0));
        let lr = r.random_range(0.01..0.3);
        let wd = r.random_range(1e-4..0.05);
        let hp = HyperParams::new(lr, wd, Bounds::default(), 1e-3).unwrap();

        let grad = &h * &theta + &c;
        let (next, saved) = optimizer_step(theta.as_slice(), grad.as_slice(), &hp, BatchId { stream: 0, seq: 0 }).unwrap();
        let next = DVector::from_column_slice(&next);
        let fresh_grad = &hf * &next + &cf;
        let (g_lr, g_wd) = hypergrad(&saved, fresh_grad.as_slice(), BatchId { stream: 1, seq: 0 }).unwrap();

        let fresh = |lr: f64, wd: f64| {
            let p = &theta - (&grad + &theta * wd) * lr;
            0.5 * p.dot(&(&hf * &p)) + cf.dot(&p)
        };
        let s = 1e-4;
        let n_lr = (fresh(lr + s, wd) - fresh(lr - s, wd)) / (2.0 * s);
        let n_wd = (fresh(lr, wd + s) - fresh(lr, wd - s)) / (2.0 * s);
        worst = worst.max(rel_err(g_lr, n_lr)).max(rel_err(g_wd, n_wd));
    }
    if worst < TOL {
        Ok(format!("100 instances, worst relative error {worst:.2e}"))
    } else {
        Err(format!("worst relative error {worst:.2e} >= {TOL:e}"))
    }
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut r = rng(33);
    let mut notes = Vec::new();
    let mut ok = true;

    // (a) monotone objective
    let mut violations = 0;
    for _ in 0..100 {
        let m = r.random_range(3..15);
        let n = m + r.random_range(2..20);
        let a = gaussian(m, n, &mut r);
        let b: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
        let cfg = IstaConfig {
            lambda: r.random_range(1e-4..0.2),
            max_iters: 300,
            tol: 0.0,
        };
        let out = ista_recover(&a, &b, lipschitz_constant(&a), None, &cfg, true).unwrap();
        let trace = out.trace.unwrap();
        // allow only rounding noise in the objective itself
        if trace.windows(2).any(|w| w[1] > w[0] + 1e-12 * w[0].abs().max(1.0)) {
            violations += 1;
        }
    }
    notes.push(format!("(a) {violations}/100 non-monotone"));
    ok &= violations == 0;

    // (b) planted support recovery
    let trials = 100;
    let mut hits = 0;
    let cfg = IstaConfig {
        lambda: 1e-4,
        max_iters: 50_000,
        tol: 1e-12,
    };
    for _ in 0..trials {
        let a = init_measurement(28, 56, &mut r).unwrap();
        let mut support: Vec<usize> = (0..56).collect();
        support.shuffle(&mut r);
        support.truncate(3);
        support.sort_unstable();
        let mut alpha = vec![0.0; 56];
        for &i in &support {
            let mag = r.random_range(0.5..1.5);
            alpha[i] = if r.random_bool(0.5) { mag } else { -mag };
        }
        let b = (&a * DVector::from_column_slice(&alpha)).as_slice().to_vec();
        let out = ista_recover(&a, &b, lipschitz_constant(&a), None, &cfg, false).unwrap();
        let mut order: Vec<usize> = (0..56).collect();
        order.sort_by(|&i, &j| out.alpha[j].abs().total_cmp(&out.alpha[i].abs()));
        let mut top: Vec<usize> = order[..3].to_vec();
        top.sort_unstable();
        if top == support {
            hits += 1;
        }
    }
    let rate = hits as f64 / trials as f64;
    notes.push(format!("(b) recovery {:.0}%", rate * 100.0));
    ok &= rate >= 0.95;

    // (c) soft threshold against a brute-force proximal grid
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let x = r.random_range(-3.0..3.0);
        let t = r.random_range(0.0..2.0);
        let soft = soft_threshold(&[x], t).unwrap()[0];
        let obj = |z: f64| 0.5 * (z - x) * (z - x) + t * z.abs();
        let steps = (8.0 / h) as i64;
        let best = (-steps..=steps)
            .map(|k| k as f64 * h)
            .min_by(|p, q| obj(*p).total_cmp(&obj(*q)))
            .unwrap();
        worst = worst.max((soft - best).abs());
    }
    notes.push(format!("(c) max gap {worst:.1e} (grid {h:e})"));
    ok &= worst <= h;

    let msg = notes.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let mut r = rng(44);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..50 {
        let n = r.random_range(7..50);
        let m = r.random_range(n / 3..n).max(1);
        let a = gaussian(m, n, &mut r);
        let e = a.transpose() * &a - DMatrix::identity(n, n);
        let alpha: Vec<f64> = (0..n)
            .map(|_| if r.random_bool(0.3) { r.random_range(-1.0..1.0) } else { 0.0 })
            .collect();
        let bvec = &a * DVector::from_column_slice(&alpha);
        let residual = (&a * DVector::from_column_slice(&alpha) - &bvec).norm();
        if residual >= 1e-10 {
            continue;
        }
        checked += 1;
        let mut g = Graph::new();
        let b = g.param(Tensor::new(vec![1, m], bvec.as_slice().to_vec()).unwrap());
        let ops: Vec<Var> = (0..n).map(|_| g.constant(uniform(&[2, 3], -1.0, 1.0, &mut r))).collect();
        let out = relaxed_node_output(&mut g, b, &a, &alpha, &e, &ops).unwrap();
        for i in 0..6 {
            let direct: f64 = (0..n).map(|k| alpha[k] * g.value(ops[k]).data()[i]).sum();
            worst = worst.max((g.value(out).data()[i] - direct).abs());
        }
    }
    if checked == 50 && worst < 1e-8 {
        Ok(format!("{checked} nodes, max deviation {worst:.2e}"))
    } else {
        Err(format!("{checked}/50 nodes checked, max deviation {worst:.2e}"))
    }
}

// ---------------------------------------------------------------- criterion 5

fn random_genotype(space: &CellSpace, r: &mut ChaCha8Rng) -> Genotype {
    let nodes = (0..space.num_nodes)
        .map(|j| {
            let mut preds: Vec<usize> = (0..space.num_preds(j)).collect();
            preds.shuffle(r);
            let mut two = [preds[0], preds[1]];
            two.sort_unstable();
            two.map(|pred| Edge {
                pred,
                op: CellOp::ALL[r.random_range(0..CellOp::ALL.len())],
            })
        })
        .collect();
    Genotype { nodes }
}

fn criterion_5() -> Outcome {
    let mut r = rng(55);
    let specs = [
        NetSpec {
            input: InputKind::Vector { dim: 4 },
            channels: 3,
            spatial: 3,
            cells: 2,
            nodes: 3,
            num_classes: 3,
        },
        NetSpec {
            input: InputKind::Image {
                channels: 1,
                height: 5,
                width: 5,
            },
            channels: 2,
            spatial: 5,
            cells: 1,
            nodes: 4,
            num_classes: 2,
        },
    ];
    let mut worst = 0.0f64;
    for k in 0..20 {
        let spec = specs[k % 2];
        let space = spec.space();
        let store = init_params(&spec, &mut r);
        let geno = random_genotype(&space, &mut r);
        let x = uniform(&spec.batch_shape(4), -1.0, 1.0, &mut r);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut b = Binder::new(&store, false);
        let child = child_forward(&mut g, &mut b, &spec, xv, &geno, None).unwrap();

        let mut b2 = Binder::new(&store, false);
        let masks: Vec<Var> = (0..spec.nodes)
            .map(|j| {
                let mut w = vec![0.0; space.slots(j)];
                for e in &geno.nodes[j] {
                    w[e.slot()] = 1.0;
                }
                g.constant(Tensor::vector(w))
            })
            .collect();
        let sup = supernet_forward(&mut g, &mut b2, &spec, xv, &masks).unwrap();
        worst = worst.max(g.value(child).max_abs_diff(g.value(sup)));
    }
    if worst <= 1e-10 {
        Ok(format!("20 genotypes, max logit gap {worst:.2e}"))
    } else {
        Err(format!("max logit gap {worst:.2e} > 1e-10"))
    }
}

// ------------------------------------------------------------ criteria 6 and 7

fn toy_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        data_seed: seed,
        iterations: 2000,
        samples: 500,
        classes: 2,
        ..RunConfig::default()
    }
}

fn ablation_runs(modes: &[RunMode], seeds: u64) -> Result<Vec<Vec<AblationRow>>, String> {
    modes
        .iter()
        .map(|&mode| {
            (0..seeds)
                .map(|seed| {
                    let cfg = toy_config(seed);
                    let (train, holdout) = load_data(&cfg).map_err(|e| e.to_string())?;
                    run_ablation(mode, &cfg, train, holdout).map_err(|e| format!("{mode} seed {seed}: {e}"))
                })
                .collect()
        })
        .collect()
}

fn criterion_6(dha: &[AblationRow]) -> Outcome {
    let passing = dha.iter().filter(|r| r.train_acc >= 0.95).count();
    let min = dha.iter().map(|r| r.train_acc).fold(f64::INFINITY, f64::min);
    let msg = format!("{passing}/{} seeds at >= 95% train accuracy (min {:.1}%)", dha.len(), min * 100.0);
    if passing == dha.len() && dha.len() == 10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_7(modes: &[RunMode], rows: &[Vec<AblationRow>]) -> Outcome {
    const TIE: f64 = 0.5;
    let means: Vec<f64> = rows
        .iter()
        .map(|rs| 100.0 * rs.iter().map(|r| r.holdout_acc).sum::<f64>() / rs.len() as f64)
        .collect();
    let summary = modes
        .iter()
        .zip(&means)
        .map(|(m, v)| format!("{m} {v:.2}%"))
        .collect::<Vec<_>>()
        .join(" >= ");
    let violations: Vec<String> = (0..means.len() - 1)
        .filter(|&i| means[i] + TIE < means[i + 1])
        .map(|i| format!("{} < {}", modes[i], modes[i + 1]))
        .collect();
    let collapse = means[0] < means[means.len() - 1] - 1.0;
    if !violations.is_empty() {
        println!("  ordering violations: {}", violations.join(", "));
    }
    if collapse {
        Err(format!("{summary}; DHA more than 1 point below NasOnly"))
    } else if violations.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; order violated"))
    }
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let catalog = Catalog::Vector;
    let k = catalog.num_pairs();
    let high = k / 2;
    let loss_of = |index: usize| if index == high { 2.0 } else { 1.0 };

    // every pair present once per step, losses forced apart
    let mut policy = DaPolicy::uniform(catalog, 1.0).unwrap();
    let mut prev = policy.probabilities()[high];
    let start = prev;
    let mut strict = true;
    for t in 0..100 {
        let draws: Vec<PairDraw> = (0..k)
            .map(|index| PairDraw {
                index,
                weight: policy.probabilities()[index],
                noise: vec![0.0; k],
            })
            .collect();
        let losses: Vec<f64> = draws.iter().map(|d| loss_of(d.index)).collect();
        let (_, grad) = da_loss_and_grad(&policy, &draws, &losses, WeightMode::Softmax).unwrap();
        policy = update_tau(&policy, &grad, 0.5, t).unwrap();
        let p = policy.probabilities()[high];
        strict &= p > prev;
        prev = p;
    }

    // the same pressure through Gumbel-max sampled batches
    let mut sampled = DaPolicy::uniform(catalog, 1.0).unwrap();
    let mut r = rng(88);
    for t in 0..100 {
        let draws = sample_pairs(&sampled, 64, &mut r).unwrap();
        let losses: Vec<f64> = draws.iter().map(|d| loss_of(d.index)).collect();
        let (_, grad) = da_loss_and_grad(&sampled, &draws, &losses, WeightMode::Softmax).unwrap();
        sampled = update_tau(&sampled, &grad, 0.5, t).unwrap();
    }
    let sampled_end = sampled.probabilities()[high];

    let msg = format!(
        "p(high) {start:.4} -> {prev:.4} strictly every step: {strict}; sampled batches end at {sampled_end:.4}"
    );
    if strict && sampled_end > start {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- criterion 9

fn csv_bytes(records: &[MetricsRecord]) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("metrics.csv");
    export_metrics(records, &p).unwrap();
    std::fs::read(&p).unwrap()
}

fn trainer_for(cfg: &RunConfig) -> Trainer {
    let (train, holdout) = load_data(cfg).unwrap();
    Trainer::new(cfg, train, holdout).unwrap()
}

fn run_records(cfg: &RunConfig) -> Vec<MetricsRecord> {
    let mut tr = trainer_for(cfg);
    let mut out = Vec::new();
    tr.run(|r| {
        out.push(r.clone());
        Ok(())
    })
    .unwrap();
    out
}

fn criterion_9() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for mode in [RunMode::Dha, RunMode::SequentialDha] {
        let cfg = RunConfig {
            mode,
            iterations: 300,
            warmup: 40,
            eval_every: 25,
            seed: 9,
            data_seed: 9,
            ..RunConfig::default()
        };
        let a = csv_bytes(&run_records(&cfg));
        let b = csv_bytes(&run_records(&cfg));
        let same = a == b;

        // split at a point inside the first phase, through the byte format
        let split = 113;
        let mut first = trainer_for(&cfg);
        let mut records = Vec::new();
        for _ in 0..split {
            records.push(first.step().unwrap());
        }
        let bytes = to_bytes(&Checkpoint {
            config: cfg.clone(),
            state: first.into_state(),
        })
        .unwrap();
        let restored = from_bytes(&bytes).unwrap();
        let (train, holdout) = load_data(&restored.config).unwrap();
        let mut second = Trainer::resume(&restored.config, train, holdout, restored.state).unwrap();
        while !second.is_done() {
            records.push(second.step().unwrap());
        }
        let resumed = csv_bytes(&records) == a;
        let rows_match = records.iter().map(metrics_row).eq(run_records(&cfg).iter().map(metrics_row));
        notes.push(format!("{mode}: repeat identical {same}, split identical {}", resumed && rows_match));
        ok &= same && resumed && rows_match;
    }
    let msg = notes.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// --------------------------------------------------------------- criterion 10

fn criterion_10() -> Outcome {
    let mut r = rng(1010);
    let (n, d, k) = (40, 5, 3);
    let x = DMatrix::from_fn(n, d, |_, _| r.random_range(-1.0..1.0));
    let y = DMatrix::from_fn(n, k, |_, _| r.random_range(-1.0..1.0));
    let w0 = uniform(&[k, d], -1.0, 1.0, &mut r);
    let b0 = uniform(&[k], -0.5, 0.5, &mut r);
    let to_mat = |t: &Tensor| DMatrix::from_row_slice(k, d, t.data());
    let predict = |w: &DMatrix<f64>, b: &[f64]| {
        let mut p = &x * w.transpose();
        for mut row in p.row_iter_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += b[c];
            }
        }
        p
    };
    let mse = |p: DMatrix<f64>| (p - &y).map(|v| v * v).sum() / (n * k) as f64;
    let objective = |pt: &[Tensor]| Ok(mse(predict(&to_mat(&pt[0]), pt[1].data())));
    let center = vec![w0.clone(), b0.clone()];
    let res = 21;
    let (grid, dl, et) = landscape(&center, res, 1.0, (1, 2), objective).map_err(|e| e.to_string())?;

    // the surface is an exact quadratic in (a, b)
    let r0 = predict(&to_mat(&w0), b0.data()) - &y;
    let rd = &x * to_mat(&dl[0]).transpose() + DMatrix::from_fn(n, k, |_, c| dl[1].data()[c]);
    let re = &x * to_mat(&et[0]).transpose() + DMatrix::from_fn(n, k, |_, c| et[1].data()[c]);
    let nk = (n * k) as f64;
    let dot = |p: &DMatrix<f64>, q: &DMatrix<f64>| p.component_mul(q).sum() / nk;
    let (l0, ld, le, ldd, lde, lee) = (dot(&r0, &r0), dot(&r0, &rd), dot(&r0, &re), dot(&rd, &rd), dot(&rd, &re), dot(&re, &re));
    let mut worst = 0.0f64;
    for (i, &a) in grid.coords.iter().enumerate() {
        for (j, &b) in grid.coords.iter().enumerate() {
            let closed = l0 + 2.0 * a * ld + 2.0 * b * le + a * a * ldd + 2.0 * a * b * lde + b * b * lee;
            let got = grid.at(i, j).ok_or("missing grid value")?;
            worst = worst.max((got - closed).abs());
        }
    }
    let mid = res / 2;
    let center_loss = mse(predict(&to_mat(&w0), b0.data()));
    let center_ok = grid.at(mid, mid) == Some(center_loss);
    let msg = format!("max gap {worst:.2e}; center equals loss: {center_ok}");
    if worst < 1e-8 && center_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------------- main

fn report(id: usize, name: &str, started: Instant, outcome: Outcome) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(msg) => {
            println!("criterion {id:>2} PASS [{secs:6.1}s] {name}: {msg}");
            true
        }
        Err(msg) => {
            println!("criterion {id:>2} FAIL [{secs:6.1}s] {name}: {msg}");
            false
        }
    }
}

fn main() {
    let mut all = true;
    let simple: [Check; 5] = [
        (1, "gradient oracles", criterion_1),
        (2, "hypergradient exactness", criterion_2),
        (3, "ISTA correctness", criterion_3),
        (4, "relaxed output identity", criterion_4),
        (5, "weight sharing", criterion_5),
    ];
    for (id, name, f) in simple {
        let t = Instant::now();
        all &= report(id, name, t, f());
    }
    let t = Instant::now();
    let modes = [RunMode::Dha, RunMode::NasPlusDaJoint, RunMode::NasPlusDaSeq, RunMode::NasOnly];
    match ablation_runs(&modes, 10) {
        Ok(rows) => {
            all &= report(6, "toy DHA run", t, criterion_6(&rows[0]));
            all &= report(7, "ablation ordering", t, criterion_7(&modes, &rows));
        }
        Err(e) => {
            all &= report(6, "toy DHA run", t, Err(e.clone()));
            all &= report(7, "ablation ordering", t, Err(e));
        }
    }

    let rest: [Check; 3] = [
        (8, "adversarial policy", criterion_8),
        (9, "determinism and resume", criterion_9),
        (10, "landscape oracle", criterion_10),
    ];
    for (id, name, f) in rest {
        let t = Instant::now();
        all &= report(id, name, t, f());
    }

    if all {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: some criteria failed");
        std::process::exit(1);
    }
}
