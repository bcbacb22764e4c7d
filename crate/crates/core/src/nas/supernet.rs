//! The weight-sharing network: stem, stacked cells and a linear classifier.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::genotype::{CellOp, CellSpace, Genotype};
use super::{NasError, Result};
use crate::tensor::{ConvConfig, Graph, PoolKind, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    /// Flat features, lifted by a dense stem to `C×S×S` maps.
    Vector { dim: usize },
    /// `[channels, height, width]` images, stemmed by a 3×3 conv.
    Image { channels: usize, height: usize, width: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetSpec {
    pub input: InputKind,
    pub channels: usize,
    /// Side of the feature map produced by the vector stem.
    pub spatial: usize,
    pub cells: usize,
    pub nodes: usize,
    pub num_classes: usize,
}

impl NetSpec {
    pub fn space(&self) -> CellSpace {
        CellSpace::new(self.nodes)
    }

    /// Stem plus classifier parameters, present in every child.
    pub fn fixed_params(&self) -> usize {
        let c = self.channels;
        let stem = match self.input {
            InputKind::Vector { dim } => {
                let out = c * self.spatial * self.spatial;
                out * dim + out
            }
            InputKind::Image { channels, .. } => c * channels * 9 + 2 * c,
        };
        stem + self.num_classes * c + self.num_classes
    }

    pub fn input_len(&self) -> usize {
        match self.input {
            InputKind::Vector { dim } => dim,
            InputKind::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    /// Batched input shape for `n` samples.
    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        match self.input {
            InputKind::Vector { dim } => vec![n, dim],
            InputKind::Image {
                channels,
                height,
                width,
            } => vec![n, channels, height, width],
        }
    }
}

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Concatenated data of the selected tensors.
    pub fn gather_flat(&self, which: &[usize]) -> Vec<f64> {
        which.iter().flat_map(|&i| self.tensors[i].data().iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::gather_flat`].
    pub fn scatter_flat(&mut self, which: &[usize], flat: &[f64]) {
        let mut at = 0;
        for &i in which {
            let d = self.tensors[i].data_mut();
            d.copy_from_slice(&flat[at..at + d.len()]);
            at += d.len();
        }
        debug_assert_eq!(at, flat.len());
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Lazily registers store tensors as graph leaves, so only parameters the
/// forward actually touches enter the graph.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    /// `trainable = false` binds parameters as constants.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Binder {
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        let i = self.store.position(name).ok_or_else(|| NasError::MissingParam(name.to_string()))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let t = self.store.tensor(i).clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// `(store index, graph var)` of every bound parameter, by store index.
    pub fn bound(&self) -> Vec<(usize, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .collect()
    }
}

fn op_prefix(cell: usize, node: usize, pred: usize, op: CellOp) -> String {
    format!("c{cell}.n{node}.p{pred}.{}", op.name())
}

fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("sized")
}

fn add_conv_stack<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, tag: &str, c: usize, k: usize, rng: &mut R) {
    store.insert(format!("{prefix}.dw{tag}"), normal_tensor(&[c, 1, k, k], (2.0 / (k * k) as f64).sqrt(), rng));
    store.insert(format!("{prefix}.pw{tag}"), normal_tensor(&[c, c, 1, 1], (2.0 / c as f64).sqrt(), rng));
    store.insert(format!("{prefix}.s{tag}"), Tensor::full(&[c], 1.0));
    store.insert(format!("{prefix}.h{tag}"), Tensor::zeros(&[c]));
}

/// He-style initialization of every supernet parameter.
pub fn init_params<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> ParamStore {
    let mut store = ParamStore::new();
    let c = spec.channels;
    match spec.input {
        InputKind::Vector { dim } => {
            let out = c * spec.spatial * spec.spatial;
            store.insert("stem.w", normal_tensor(&[out, dim], (2.0 / dim as f64).sqrt(), rng));
            store.insert("stem.b", Tensor::zeros(&[out]));
        }
        InputKind::Image { channels, .. } => {
            store.insert("stem.w", normal_tensor(&[c, channels, 3, 3], (2.0 / (9 * channels) as f64).sqrt(), rng));
            store.insert("stem.scale", Tensor::full(&[c], 1.0));
            store.insert("stem.shift", Tensor::zeros(&[c]));
        }
    }
    let space = spec.space();
    for cell in 0..spec.cells {
        for j in 0..spec.nodes {
            for p in 0..space.num_preds(j) {
                for op in CellOp::ALL {
                    let prefix = op_prefix(cell, j, p, op);
                    match op {
                        CellOp::SepConv3 | CellOp::SepConv5 => {
                            add_conv_stack(&mut store, &prefix, "1", c, op.kernel(), rng);
                            add_conv_stack(&mut store, &prefix, "2", c, op.kernel(), rng);
                        }
                        CellOp::DilConv3 | CellOp::DilConv5 => add_conv_stack(&mut store, &prefix, "", c, op.kernel(), rng),
                        _ => {}
                    }
                }
            }
        }
    }
    store.insert("cls.w", normal_tensor(&[spec.num_classes, c], (1.0 / c as f64).sqrt(), rng));
    store.insert("cls.b", Tensor::zeros(&[spec.num_classes]));
    store
}

/// relu, depthwise conv (`depthwise` carries kernel, dilation and groups),
/// pointwise conv, affine.
fn conv_stack(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str, tag: &str, depthwise: ConvConfig) -> Result<Var> {
    let h = g.relu(x);
    let dw = b.get(g, &format!("{prefix}.dw{tag}"))?;
    let h = g.conv2d(h, dw, depthwise)?;
    let pw = b.get(g, &format!("{prefix}.pw{tag}"))?;
    let h = g.conv2d(h, pw, ConvConfig::default())?;
    let s = b.get(g, &format!("{prefix}.s{tag}"))?;
    let sh = b.get(g, &format!("{prefix}.h{tag}"))?;
    Ok(g.affine(h, s, sh)?)
}

fn apply_op(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str, op: CellOp, c: usize) -> Result<Var> {
    let k = op.kernel();
    match op {
        CellOp::SepConv3 | CellOp::SepConv5 => {
            let dw = ConvConfig::same(k, 1).with_groups(c);
            let h = conv_stack(g, b, x, prefix, "1", dw)?;
            conv_stack(g, b, h, prefix, "2", dw)
        }
        CellOp::DilConv3 | CellOp::DilConv5 => conv_stack(g, b, x, prefix, "", ConvConfig::same(k, 2).with_groups(c)),
        CellOp::MaxPool3 => Ok(g.pool3x3(x, PoolKind::Max, 1)?),
        CellOp::AvgPool3 => Ok(g.pool3x3(x, PoolKind::Avg, 1)?),
        CellOp::Identity => Ok(x),
    }
}

fn stem(g: &mut Graph, b: &mut Binder, spec: &NetSpec, x: Var) -> Result<Var> {
    match spec.input {
        InputKind::Vector { .. } => {
            let w = b.get(g, "stem.w")?;
            let wt = g.transpose(w)?;
            let h = g.matmul(x, wt)?;
            let bias = b.get(g, "stem.b")?;
            let h = g.bias_add(h, bias)?;
            let n = g.value(x).shape()[0];
            Ok(g.reshape(h, &[n, spec.channels, spec.spatial, spec.spatial])?)
        }
        InputKind::Image { .. } => {
            let w = b.get(g, "stem.w")?;
            let h = g.conv2d(x, w, ConvConfig::same(3, 1))?;
            let s = b.get(g, "stem.scale")?;
            let sh = b.get(g, "stem.shift")?;
            Ok(g.affine(h, s, sh)?)
        }
    }
}

fn classifier(g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
    let pooled = g.global_avg_pool(x)?;
    let w = b.get(g, "cls.w")?;
    let wt = g.transpose(w)?;
    let logits = g.matmul(pooled, wt)?;
    let bias = b.get(g, "cls.b")?;
    Ok(g.bias_add(logits, bias)?)
}

/// Runs the cell stack; `node_fn(g, binder, cell, j, states)` yields node
/// `j`'s output from the DAG states so far.
fn run_cells<F>(g: &mut Graph, b: &mut Binder, spec: &NetSpec, x: Var, mut node_fn: F) -> Result<Var>
where
    F: FnMut(&mut Graph, &mut Binder, usize, usize, &[Var]) -> Result<Var>,
{
    let s = stem(g, b, spec, x)?;
    let (mut s0, mut s1) = (s, s);
    for cell in 0..spec.cells {
        let mut states = vec![s0, s1];
        for j in 0..spec.nodes {
            let out = node_fn(g, b, cell, j, &states)?;
            states.push(out);
        }
        let mut acc = states[2];
        for &v in &states[3..] {
            acc = g.add(acc, v)?;
        }
        let out = if spec.nodes > 1 {
            g.scale(acc, 1.0 / spec.nodes as f64)
        } else {
            acc
        };
        s0 = s1;
        s1 = out;
    }
    classifier(g, b, s1)
}

/// Relaxed forward over every candidate slot. `weights[j]` is node `j`'s
/// weight vector (length `slots(j)`), shared by all cells.
pub fn supernet_forward(g: &mut Graph, b: &mut Binder, spec: &NetSpec, x: Var, weights: &[Var]) -> Result<Var> {
    let space = spec.space();
    if weights.len() != spec.nodes {
        return Err(NasError::LengthMismatch {
            what: "node weights",
            expected: spec.nodes,
            got: weights.len(),
        });
    }
    let c = spec.channels;
    run_cells(g, b, spec, x, |g, b, cell, j, states| {
        let mut outs = Vec::with_capacity(space.slots(j));
        for (p, &input) in states.iter().enumerate().take(space.num_preds(j)) {
            for op in CellOp::ALL {
                outs.push(apply_op(g, b, input, &op_prefix(cell, j, p, op), op, c)?);
            }
        }
        Ok(g.weighted_sum(weights[j], &outs)?)
    })
}

/// Forward of the discrete child. With `edge_weights`, node `j` returns the
/// weighted sum of its two retained ops (weights of length 2, in the
/// genotype's edge order); without, their plain sum.
pub fn child_forward(
    g: &mut Graph,
    b: &mut Binder,
    spec: &NetSpec,
    x: Var,
    genotype: &Genotype,
    edge_weights: Option<&[Var]>,
) -> Result<Var> {
    genotype.validate(&spec.space())?;
    if let Some(w) = edge_weights {
        if w.len() != spec.nodes {
            return Err(NasError::LengthMismatch {
                what: "edge weights",
                expected: spec.nodes,
                got: w.len(),
            });
        }
    }
    let c = spec.channels;
    run_cells(g, b, spec, x, |g, b, cell, j, states| {
        let mut outs = [states[0]; 2];
        for (k, e) in genotype.nodes[j].iter().enumerate() {
            outs[k] = apply_op(g, b, states[e.pred], &op_prefix(cell, j, e.pred, e.op), e.op, c)?;
        }
        match edge_weights {
            Some(w) => Ok(g.weighted_sum(w[j], &outs)?),
            None => Ok(g.add(outs[0], outs[1])?),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nas::Edge;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> NetSpec {
        NetSpec {
            input: InputKind::Vector { dim: 3 },
            channels: 3,
            spatial: 3,
            cells: 2,
            nodes: 2,
            num_classes: 2,
        }
    }

    #[test]
    fn child_binds_exactly_its_parameter_count() {
        let s = spec();
        let store = init_params(&s, &mut ChaCha8Rng::seed_from_u64(0));
        let geno = Genotype {
            nodes: vec![
                [Edge { pred: 0, op: CellOp::SepConv3 }, Edge { pred: 1, op: CellOp::MaxPool3 }],
                [Edge { pred: 1, op: CellOp::DilConv5 }, Edge { pred: 2, op: CellOp::Identity }],
            ],
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 / 12.0).collect()).unwrap());
        let mut b = Binder::new(&store, true);
        let logits = child_forward(&mut g, &mut b, &s, x, &geno, None).unwrap();
        assert_eq!(g.value(logits).shape(), &[4, 2]);
        let used: usize = b.bound().iter().map(|(i, _)| store.tensor(*i).numel()).sum();
        assert_eq!(used, geno.param_count(&s));
    }

    #[test]
    fn supernet_store_covers_all_slots() {
        let s = spec();
        let store = init_params(&s, &mut ChaCha8Rng::seed_from_u64(0));
        let per_edge: usize = CellOp::ALL.iter().map(|op| op.param_count(3)).sum();
        assert_eq!(store.numel(), s.fixed_params() + s.cells * s.space().num_edges() * per_edge);
    }

    #[test]
    fn flat_round_trip() {
        let mut store = init_params(&spec(), &mut ChaCha8Rng::seed_from_u64(1));
        let which = [0, 3, 5];
        let mut flat = store.gather_flat(&which);
        for v in &mut flat {
            *v += 1.0;
        }
        store.scatter_flat(&which, &flat);
        assert_eq!(store.gather_flat(&which), flat);
    }
}
