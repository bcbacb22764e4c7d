//! Compressed architecture state: per node a measurement matrix `A`, a
//! trainable code `b` and the logits `α` recovered from it.

use nalgebra::DMatrix;
use rand::Rng;

use super::genotype::CellSpace;
use super::ista::{ista_recover, lipschitz_constant, IstaConfig};
use super::measurement::init_measurement;
use super::{NasError, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchConfig {
    pub ista: IstaConfig,
    /// `m_j = ceil(compression · n_j)`.
    pub compression: f64,
    /// Half-width of the uniform jitter added to the initial logits.
    pub init_jitter: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            ista: IstaConfig::default(),
            compression: 0.5,
            init_jitter: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeCode {
    pub a: DMatrix<f64>,
    /// Cached `AᵀA − I`.
    pub e: DMatrix<f64>,
    pub b: Vec<f64>,
    pub alpha: Vec<f64>,
    pub lipschitz: f64,
}

impl NodeCode {
    fn new(a: DMatrix<f64>, b: Vec<f64>, alpha: Vec<f64>) -> Self {
        let n = a.ncols();
        let e = a.transpose() * &a - DMatrix::identity(n, n);
        let lipschitz = lipschitz_constant(&a);
        NodeCode {
            a,
            e,
            b,
            alpha,
            lipschitz,
        }
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    /// `αᵀE` as a plain vector.
    pub fn alpha_e(&self) -> Vec<f64> {
        (0..self.n())
            .map(|k| (0..self.n()).map(|i| self.alpha[i] * self.e[(i, k)]).sum())
            .collect()
    }

    fn recover(&mut self, cfg: &IstaConfig, warm: bool) -> Result<()> {
        let start = warm.then_some(self.alpha.as_slice());
        let out = ista_recover(&self.a, &self.b, self.lipschitz, start, cfg, false)?;
        self.alpha = out.alpha;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchState {
    nodes: Vec<NodeCode>,
    ista: IstaConfig,
}

impl ArchState {
    /// Draws `A_j`, sets `b_j = A_j α₀` with `α₀` near uniform (1/7 per slot)
    /// and recovers `α_j`.
    pub fn init<R: Rng + ?Sized>(space: &CellSpace, cfg: &ArchConfig, rng: &mut R) -> Result<Self> {
        let mut nodes = Vec::with_capacity(space.num_nodes);
        for j in 0..space.num_nodes {
            let n = space.slots(j);
            let m = ((cfg.compression * n as f64).ceil() as usize).clamp(1, n - 1);
            let a = init_measurement(m, n, rng)?;
            let base = 1.0 / super::CellOp::ALL.len() as f64;
            let alpha0: Vec<f64> = (0..n)
                .map(|_| base + cfg.init_jitter * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            let b = (&a * nalgebra::DVector::from_column_slice(&alpha0)).as_slice().to_vec();
            let mut node = NodeCode::new(a, b, vec![0.0; n]);
            node.recover(&cfg.ista, false)?;
            nodes.push(node);
        }
        Ok(ArchState { nodes, ista: cfg.ista })
    }

    /// Builds a state from given matrices and codes, recovering `α` cold.
    pub fn with_matrices(mats: Vec<DMatrix<f64>>, codes: Vec<Vec<f64>>, ista: IstaConfig) -> Result<Self> {
        if mats.len() != codes.len() {
            return Err(NasError::LengthMismatch {
                what: "compressed codes",
                expected: mats.len(),
                got: codes.len(),
            });
        }
        let mut nodes = Vec::with_capacity(mats.len());
        for (a, b) in mats.into_iter().zip(codes) {
            if b.len() != a.nrows() {
                return Err(NasError::LengthMismatch {
                    what: "compressed vector",
                    expected: a.nrows(),
                    got: b.len(),
                });
            }
            let n = a.ncols();
            let mut node = NodeCode::new(a, b, vec![0.0; n]);
            node.recover(&ista, false)?;
            nodes.push(node);
        }
        Ok(ArchState { nodes, ista })
    }

    /// Restores a saved state verbatim (no recovery is run).
    pub fn from_parts(parts: Vec<(DMatrix<f64>, Vec<f64>, Vec<f64>)>, ista: IstaConfig) -> Result<Self> {
        let mut nodes = Vec::with_capacity(parts.len());
        for (a, b, alpha) in parts {
            if b.len() != a.nrows() || alpha.len() != a.ncols() {
                return Err(NasError::LengthMismatch {
                    what: "saved node",
                    expected: a.nrows() + a.ncols(),
                    got: b.len() + alpha.len(),
                });
            }
            nodes.push(NodeCode::new(a, b, alpha));
        }
        Ok(ArchState { nodes, ista })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, j: usize) -> &NodeCode {
        &self.nodes[j]
    }

    pub fn nodes(&self) -> &[NodeCode] {
        &self.nodes
    }

    pub fn ista(&self) -> &IstaConfig {
        &self.ista
    }

    pub fn alphas(&self) -> Vec<Vec<f64>> {
        self.nodes.iter().map(|n| n.alpha.clone()).collect()
    }

    /// Mean over nodes of the entropy of `|α_j| / ‖α_j‖₁` (0 for an all-zero node).
    pub fn alpha_entropy(&self) -> f64 {
        if self.nodes.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .nodes
            .iter()
            .map(|n| {
                let s: f64 = n.alpha.iter().map(|v| v.abs()).sum();
                if s == 0.0 {
                    return 0.0;
                }
                n.alpha
                    .iter()
                    .map(|v| v.abs() / s)
                    .filter(|&p| p > 0.0)
                    .map(|p| -p * p.ln())
                    .sum()
            })
            .sum();
        total / self.nodes.len() as f64
    }

    /// Gradient step on every `b_j`, then warm-started recovery of each `α_j`
    /// whose code moved.
    pub fn update_b(&mut self, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.nodes.len() {
            return Err(NasError::LengthMismatch {
                what: "code gradients",
                expected: self.nodes.len(),
                got: grads.len(),
            });
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if g.len() != node.m() {
                return Err(NasError::LengthMismatch {
                    what: "code gradient",
                    expected: node.m(),
                    got: g.len(),
                });
            }
            let mut moved = false;
            for (b, gv) in node.b.iter_mut().zip(g) {
                let next = *b - lr * gv;
                moved |= next != *b;
                *b = next;
            }
            if moved {
                node.recover(&self.ista, true)?;
            }
        }
        Ok(())
    }
}

/// Graph weights `w = bᵀA − αᵀE` for one node, with `b` a `[1, m]` var and
/// `α` held constant. Returns a `[n]` var.
pub fn relaxed_weights(g: &mut Graph, b: Var, a: &DMatrix<f64>, alpha: &[f64], e: &DMatrix<f64>) -> Result<Var> {
    let (m, n) = a.shape();
    if alpha.len() != n {
        return Err(NasError::LengthMismatch {
            what: "alpha",
            expected: n,
            got: alpha.len(),
        });
    }
    let a_row_major: Vec<f64> = (0..m).flat_map(|i| (0..n).map(move |k| a[(i, k)])).collect();
    let av = g.constant(Tensor::new(vec![m, n], a_row_major)?);
    let ba = g.matmul(b, av)?;
    let ae: Vec<f64> = (0..n).map(|k| (0..n).map(|i| alpha[i] * e[(i, k)]).sum()).collect();
    let aev = g.constant(Tensor::new(vec![1, n], ae)?);
    let w = g.sub(ba, aev)?;
    Ok(g.reshape(w, &[n])?)
}

/// Node output `(bᵀA − αᵀE)·o`, so gradients reach `b` through `bᵀA` only.
pub fn relaxed_node_output(
    g: &mut Graph,
    b: Var,
    a: &DMatrix<f64>,
    alpha: &[f64],
    e: &DMatrix<f64>,
    ops: &[Var],
) -> Result<Var> {
    if ops.len() != a.ncols() {
        return Err(NasError::LengthMismatch {
            what: "op outputs",
            expected: a.ncols(),
            got: ops.len(),
        });
    }
    let w = relaxed_weights(g, b, a, alpha, e)?;
    Ok(g.weighted_sum(w, ops)?)
}
