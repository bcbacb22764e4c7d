use super::conv::{self, ConvConfig, ConvGeom, PoolKind};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduction {
    Mean,
    None,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    BiasAdd(Var, Var),
    Affine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        stride: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Gather(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        reduction: Reduction,
    },
    WeightedSum {
        weights: Var,
        inputs: Vec<Var>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::BiasAdd(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::GlobalAvgPool(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a)
            | Op::Gather(a, _) => vec![*a],
            Op::Affine { x, scale, shift } => vec![*x, *scale, *shift],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Pool { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::WeightedSum { weights, inputs } => {
                let mut v = vec![*weights];
                v.extend(inputs.iter().copied());
                v
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only record of a forward computation.
///
/// Node ids are assigned in creation order, so every op's inputs precede it
/// and the reverse creation order is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut Option<Tensor>, shape: &[usize], src: &[f64]) {
    match dst {
        Some(t) => {
            for (d, s) in t.data_mut().iter_mut().zip(src) {
                *d += s;
            }
        }
        None => {
            *dst = Some(Tensor {
                shape: shape.to_vec(),
                data: src.to_vec(),
            })
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf whose gradient is kept after backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass. Nodes that do not influence the
    /// loss report `None`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    /// Distance from the current point to the nearest place where the
    /// recorded computation stops being differentiable: the smallest
    /// |input| of any relu and the smallest gap between the winner and the
    /// runner-up of any max-pool window. Infinite for smooth graphs.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for v in self.nodes[a.0].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::Pool {
                    x,
                    kind: PoolKind::Max,
                    stride,
                    ..
                } => {
                    let t = &self.nodes[x.0].value;
                    margin = margin.min(conv::max_pool_gap(t.shape(), t.data(), *stride));
                }
                _ => {}
            }
        }
        margin
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || tb.is_scalar() {
            Ok(ta.shape().to_vec())
        } else if ta.is_scalar() {
            Ok(tb.shape().to_vec())
        } else {
            Err(mismatch(op, ta, tb))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = da.len().max(db.len());
        (0..n)
            .map(|i| {
                let x = if da.len() == 1 { da[0] } else { da[i] };
                let y = if db.len() == 1 { db[0] } else { db[i] };
                f(x, y)
            })
            .collect()
    }

    /// Elementwise sum; either side may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("add", a, b)?;
        let data = self.zip_broadcast(a, b, |x, y| x + y);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("sub", a, b)?;
        let data = self.zip_broadcast(a, b, |x, y| x - y);
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("mul", a, b)?;
        let data = self.zip_broadcast(a, b, |x, y| x * y);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v * c).collect(),
        };
        self.push(value, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(a, b),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected a matrix, got {:?}", t.shape()),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let data = transpose_raw(t.data(), r, c);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(a),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let value = t.reshaped(shape.to_vec()).map_err(|_| TensorError::ShapeMismatch {
            op: "reshape",
            lhs: t.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        };
        self.push(value, Op::Relu(a))
    }

    fn channel_layout(&self, op: &'static str, x: Var, per_channel: &[Var]) -> Result<(usize, usize, usize)> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() < 2 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("expected at least 2 dims, got {s:?}"),
            });
        }
        let c = s[1];
        for &p in per_channel {
            let tp = self.value(p);
            if tp.numel() != c {
                return Err(mismatch(op, tx, tp));
            }
        }
        let inner: usize = s[2..].iter().product();
        Ok((s[0], c, inner))
    }

    /// Adds a per-channel bias along axis 1.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, inner) = self.channel_layout("bias_add", x, &[bias])?;
        let tx = self.value(x);
        let b = self.value(bias).data();
        let mut data = tx.data().to_vec();
        for i in 0..n {
            for (ch, &bc) in b.iter().enumerate().take(c) {
                let base = (i * c + ch) * inner;
                for v in &mut data[base..base + inner] {
                    *v += bc;
                }
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::BiasAdd(x, bias)))
    }

    /// Per-channel `scale * x + shift` along axis 1.
    pub fn affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, inner) = self.channel_layout("affine", x, &[scale, shift])?;
        let tx = self.value(x);
        let (s, b) = (self.value(scale).data(), self.value(shift).data());
        let mut data = tx.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for v in &mut data[base..base + inner] {
                    *v = *v * s[ch] + b[ch];
                }
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Affine { x, scale, shift }))
    }

    /// 2-D convolution of an NCHW input with an `[out, in/groups, kh, kw]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, cfg: ConvConfig) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let geom = conv::conv_geom(tx.shape(), tw.shape(), cfg)?;
        let data = conv::conv2d_forward(&geom, tx.data(), tw.data());
        let shape = vec![geom.n, geom.cout, geom.oh, geom.ow];
        Ok(self.push(Tensor { shape, data }, Op::Conv2d { x, w, geom }))
    }

    /// 3x3 pooling, padding 1.
    pub fn pool3x3(&mut self, x: Var, kind: PoolKind, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        let (shape, data, argmax) = conv::pool3_forward(tx.shape(), tx.data(), kind, stride)?;
        Ok(self.push(
            Tensor { shape, data },
            Op::Pool {
                x,
                kind,
                stride,
                argmax,
            },
        ))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 {
            return Err(TensorError::Invalid {
                op: "global_avg_pool",
                msg: format!("expected NCHW, got {s:?}"),
            });
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let data = tx
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(
            Tensor {
                shape: vec![n, c],
                data,
            },
            Op::GlobalAvgPool(x),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(v), Op::Mean(a))
    }

    /// Softmax of a 1-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 1 {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("expected a vector, got {:?}", t.shape()),
            });
        }
        let data = softmax_raw(t.data());
        Ok(self.push(Tensor::vector(data), Op::Softmax(a)))
    }

    /// Selects entries of a 1-D tensor; indices may repeat.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 1 {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("expected a vector, got {:?}", t.shape()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for length {}", t.numel()),
            });
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        Ok(self.push(Tensor::vector(data), Op::Gather(a, indices.to_vec())))
    }

    fn cross_entropy_impl(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                msg: format!("label {bad} out of range for {k} classes"),
            });
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut losses = Vec::with_capacity(n);
        for (row, &y) in t.data().chunks(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            losses.push(lse - row[y]);
            probs.extend(softmax_raw(row));
        }
        let value = match reduction {
            Reduction::Mean => Tensor::scalar(losses.iter().sum::<f64>() / n as f64),
            Reduction::None => Tensor::vector(losses),
        };
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                reduction,
            },
        ))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, Reduction::Mean)
    }

    /// Per-sample softmax cross-entropy, shape `[N]`.
    pub fn softmax_cross_entropy_per_sample(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, Reduction::None)
    }

    /// `sum_k weights[k] * inputs[k]` over same-shape inputs.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        let tw = self.value(weights);
        if tw.numel() != inputs.len() || inputs.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                lhs: tw.shape().to_vec(),
                rhs: vec![inputs.len()],
            });
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        let mut data = vec![0.0; self.value(inputs[0]).numel()];
        for (k, &x) in inputs.iter().enumerate() {
            let tx = self.value(x);
            if tx.shape() != shape.as_slice() {
                return Err(mismatch("weighted_sum", self.value(inputs[0]), tx));
            }
            let wk = self.value(weights).data()[k];
            for (d, v) in data.iter_mut().zip(tx.data()) {
                *d += wk * v;
            }
        }
        Ok(self.push(
            Tensor { shape, data },
            Op::WeightedSum {
                weights,
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Reverse pass from a one-element `loss`, filling gradients of every node
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor {
            shape: loss_shape,
            data: vec![1.0],
        });
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.vjp(i, &gout);
            self.nodes[i].grad = Some(gout);
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let shape = self.nodes[input.0].value.shape().to_vec();
                add_into(&mut self.nodes[input.0].grad, &shape, &g);
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn vjp(&self, i: usize, gout: &Tensor) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let g = gout.data();
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let reduce_to = |v: Var, full: Vec<f64>| -> Vec<f64> {
            if self.value(v).is_scalar() && full.len() != 1 {
                vec![full.iter().sum()]
            } else {
                full
            }
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, reduce_to(*a, g.to_vec())), (*b, reduce_to(*b, g.to_vec()))],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(*a, g.to_vec())),
                (*b, reduce_to(*b, g.iter().map(|v| -v).collect())),
            ],
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                if needs(a) {
                    let full = self.zip_grad(g, *b, |go, y| go * y);
                    out.push((*a, reduce_to(*a, full)));
                }
                if needs(b) {
                    let full = self.zip_grad(g, *a, |go, x| go * x);
                    out.push((*b, reduce_to(*b, full)));
                }
                out
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut out = Vec::new();
                if needs(a) {
                    let bt = transpose_raw(tb.data(), k, n);
                    out.push((*a, matmul_raw(g, &bt, m, n, k)));
                }
                if needs(b) {
                    let at = transpose_raw(ta.data(), m, k);
                    out.push((*b, matmul_raw(&at, g, k, m, n)));
                }
                out
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                vec![(*a, transpose_raw(g, s[0], s[1]))]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Relu(a) => {
                let x = self.value(*a).data();
                vec![(*a, g.iter().zip(x).map(|(go, &v)| if v > 0.0 { *go } else { 0.0 }).collect())]
            }
            Op::BiasAdd(x, bias) => {
                let s = node.value.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut gb = vec![0.0; c];
                for i in 0..n {
                    for (ch, acc) in gb.iter_mut().enumerate() {
                        let base = (i * c + ch) * inner;
                        *acc += g[base..base + inner].iter().sum::<f64>();
                    }
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::Affine { x, scale, shift } => {
                let s = node.value.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let xv = self.value(*x).data();
                let sv = self.value(*scale).data();
                let mut gx = vec![0.0; xv.len()];
                let mut gs = vec![0.0; c];
                let mut gt = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for j in base..base + inner {
                            gx[j] = g[j] * sv[ch];
                            gs[ch] += g[j] * xv[j];
                            gt[ch] += g[j];
                        }
                    }
                }
                vec![(*x, gx), (*scale, gs), (*shift, gt)]
            }
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) = conv::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    needs(x),
                    needs(w),
                );
                let mut out = Vec::new();
                if needs(x) {
                    out.push((*x, gx));
                }
                if needs(w) {
                    out.push((*w, gw));
                }
                out
            }
            Op::Pool {
                x,
                kind,
                stride,
                argmax,
            } => {
                let gx = conv::pool3_backward(self.value(*x).shape(), node.value.shape(), *kind, *stride, argmax, g);
                vec![(*x, gx)]
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let hw = s[2] * s[3];
                let gx = g.iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect();
                vec![(*x, gx)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Softmax(a) => {
                let p = node.value.data();
                let dot: f64 = p.iter().zip(g).map(|(pi, gi)| pi * gi).sum();
                vec![(*a, p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect())]
            }
            Op::Gather(a, idx) => {
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (&j, &gv) in idx.iter().zip(g) {
                    ga[j] += gv;
                }
                vec![(*a, ga)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                reduction,
            } => {
                let k = self.value(*logits).shape()[1];
                let n = labels.len();
                let mut gl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * k + y] -= 1.0;
                    let w = match reduction {
                        Reduction::Mean => g[0] / n as f64,
                        Reduction::None => g[r],
                    };
                    for v in &mut gl[r * k..(r + 1) * k] {
                        *v *= w;
                    }
                }
                vec![(*logits, gl)]
            }
            Op::WeightedSum { weights, inputs } => {
                let wv = self.value(*weights).data();
                let mut out = Vec::new();
                if needs(weights) {
                    let gw = inputs
                        .iter()
                        .map(|x| self.value(*x).data().iter().zip(g).map(|(a, b)| a * b).sum())
                        .collect();
                    out.push((*weights, gw));
                }
                for (k, x) in inputs.iter().enumerate() {
                    if needs(x) {
                        out.push((*x, g.iter().map(|v| v * wv[k]).collect()));
                    }
                }
                out
            }
        }
    }

    fn zip_grad(&self, g: &[f64], other: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let o = self.value(other).data();
        g.iter()
            .enumerate()
            .map(|(i, &gv)| f(gv, if o.len() == 1 { o[0] } else { o[i] }))
            .collect()
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax_raw(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
