use std::fmt;
use std::str::FromStr;

use super::supernet::NetSpec;
use super::{NasError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CellOp {
    SepConv3,
    SepConv5,
    DilConv3,
    DilConv5,
    MaxPool3,
    AvgPool3,
    Identity,
}

impl CellOp {
    /// Catalog order; a slot's op index is its position here.
    pub const ALL: [CellOp; 7] = [
        CellOp::SepConv3,
        CellOp::SepConv5,
        CellOp::DilConv3,
        CellOp::DilConv5,
        CellOp::MaxPool3,
        CellOp::AvgPool3,
        CellOp::Identity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CellOp::SepConv3 => "sep_conv_3x3",
            CellOp::SepConv5 => "sep_conv_5x5",
            CellOp::DilConv3 => "dil_conv_3x3",
            CellOp::DilConv5 => "dil_conv_5x5",
            CellOp::MaxPool3 => "max_pool_3x3",
            CellOp::AvgPool3 => "avg_pool_3x3",
            CellOp::Identity => "identity",
        }
    }

    pub fn kernel(self) -> usize {
        match self {
            CellOp::SepConv5 | CellOp::DilConv5 => 5,
            _ => 3,
        }
    }

    pub fn is_parametric(self) -> bool {
        !matches!(self, CellOp::MaxPool3 | CellOp::AvgPool3 | CellOp::Identity)
    }

    /// Trainable parameters of this op at `c` channels. A separable conv is
    /// two (depthwise, pointwise, affine) stacks; a dilated conv is one.
    pub fn param_count(self, c: usize) -> usize {
        let k = self.kernel();
        let stack = c * k * k + c * c + 2 * c;
        match self {
            CellOp::SepConv3 | CellOp::SepConv5 => 2 * stack,
            CellOp::DilConv3 | CellOp::DilConv5 => stack,
            _ => 0,
        }
    }
}

impl fmt::Display for CellOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellOp {
    type Err = NasError;

    fn from_str(s: &str) -> Result<Self> {
        CellOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| NasError::UnknownOp(s.to_string()))
    }
}

/// A cell: two inputs followed by `num_nodes` intermediate nodes, each fed by
/// every earlier node. DAG ids 0 and 1 are the inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellSpace {
    pub num_nodes: usize,
}

impl CellSpace {
    pub fn new(num_nodes: usize) -> Self {
        CellSpace { num_nodes }
    }

    /// Predecessor count of intermediate node `j`.
    pub fn num_preds(&self, j: usize) -> usize {
        2 + j
    }

    /// Candidate slots of node `j`: one per (predecessor, op).
    pub fn slots(&self, j: usize) -> usize {
        self.num_preds(j) * CellOp::ALL.len()
    }

    pub fn slot(pred: usize, op: CellOp) -> usize {
        pred * CellOp::ALL.len() + op.index()
    }

    pub fn num_edges(&self) -> usize {
        (0..self.num_nodes).map(|j| self.num_preds(j)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    /// DAG id of the source node.
    pub pred: usize,
    pub op: CellOp,
}

impl Edge {
    pub fn slot(&self) -> usize {
        CellSpace::slot(self.pred, self.op)
    }
}

/// Two retained input edges per intermediate node, sorted by predecessor.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub nodes: Vec<[Edge; 2]>,
}

impl Genotype {
    pub fn validate(&self, space: &CellSpace) -> Result<()> {
        if self.nodes.len() != space.num_nodes {
            return Err(NasError::InvalidGenotype(format!(
                "{} nodes, space has {}",
                self.nodes.len(),
                space.num_nodes
            )));
        }
        for (j, edges) in self.nodes.iter().enumerate() {
            if edges[0].pred == edges[1].pred {
                return Err(NasError::InvalidGenotype(format!("node {j} repeats predecessor {}", edges[0].pred)));
            }
            if let Some(e) = edges.iter().find(|e| e.pred >= space.num_preds(j)) {
                return Err(NasError::InvalidGenotype(format!("node {j} reads later node {}", e.pred)));
            }
        }
        Ok(())
    }

    /// Parameters of the materialized child, stem and classifier included.
    pub fn param_count(&self, net: &NetSpec) -> usize {
        let per_cell: usize = self.nodes.iter().flatten().map(|e| e.op.param_count(net.channels)).sum();
        net.fixed_params() + net.cells * per_cell
    }

    /// Stable 64-bit fingerprint (FNV-1a over predecessors and op indices).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in self.nodes.iter().flatten() {
            for byte in [e.pred as u8, e.op.index() as u8] {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// One line per retained edge: `node,predecessor,op_name,alpha_value`.
    pub fn export_text(&self, alphas: &[Vec<f64>]) -> String {
        let mut out = String::from("node,predecessor,op_name,alpha_value\n");
        for (j, edges) in self.nodes.iter().enumerate() {
            for e in edges {
                let a = alphas.get(j).and_then(|v| v.get(e.slot())).copied().unwrap_or(0.0);
                out.push_str(&format!("{},{},{},{}\n", j + 2, e.pred, e.op, a));
            }
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Genotype> {
        let mut nodes: Vec<Vec<Edge>> = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || NasError::InvalidGenotype(format!("line {}: {line:?}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let node: usize = f[0].parse().map_err(|_| bad())?;
            let pred: usize = f[1].parse().map_err(|_| bad())?;
            let op: CellOp = f[2].parse()?;
            let j = node.checked_sub(2).ok_or_else(bad)?;
            if nodes.len() <= j {
                nodes.resize(j + 1, Vec::new());
            }
            nodes[j].push(Edge { pred, op });
        }
        let nodes = nodes
            .into_iter()
            .enumerate()
            .map(|(j, e)| {
                <[Edge; 2]>::try_from(e).map_err(|e| NasError::InvalidGenotype(format!("node {} has {} edges", j + 2, e.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Genotype { nodes })
    }
}

/// Inclusive parameter limit.
pub fn check_constraint(count: usize, limit: usize) -> bool {
    count <= limit
}

/// Index of the largest `|value|`, ties to the lower index.
fn argmax_abs(values: impl IntoIterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v.abs() > best.1 {
            best = (i, v.abs());
        }
    }
    best
}

/// Discretizes recovered logits: per node the two predecessors with the
/// largest max-|α| and on each the op with the largest |α|.
pub fn extract_child(space: &CellSpace, alphas: &[Vec<f64>]) -> Result<Genotype> {
    if alphas.len() != space.num_nodes {
        return Err(NasError::LengthMismatch {
            what: "node logits",
            expected: space.num_nodes,
            got: alphas.len(),
        });
    }
    let k = CellOp::ALL.len();
    let mut nodes = Vec::with_capacity(space.num_nodes);
    for (j, alpha) in alphas.iter().enumerate() {
        if alpha.len() != space.slots(j) {
            return Err(NasError::LengthMismatch {
                what: "slot logits",
                expected: space.slots(j),
                got: alpha.len(),
            });
        }
        if alpha.iter().all(|&v| v == 0.0) {
            log::warn!("node {} has all-zero logits; falling back to identity edges", j + 2);
            nodes.push([
                Edge {
                    pred: 0,
                    op: CellOp::Identity,
                },
                Edge {
                    pred: 1,
                    op: CellOp::Identity,
                },
            ]);
            continue;
        }
        let mut preds: Vec<(usize, f64)> = (0..space.num_preds(j))
            .map(|p| (p, argmax_abs(alpha[p * k..(p + 1) * k].iter().copied()).1))
            .collect();
        // stable sort keeps lower predecessors first among equal strengths
        preds.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut chosen = [preds[0].0, preds[1].0];
        chosen.sort_unstable();
        let edge = |p: usize| Edge {
            pred: p,
            op: CellOp::ALL[argmax_abs(alpha[p * k..(p + 1) * k].iter().copied()).0],
        };
        nodes.push([edge(chosen[0]), edge(chosen[1])]);
    }
    Ok(Genotype { nodes })
}

/// [`extract_child`] followed by a greedy repair: while the child exceeds
/// `limit`, the retained parametric op with the smallest |α| is swapped for
/// the strongest parameter-free op on the same edge.
pub fn extract_child_constrained(space: &CellSpace, alphas: &[Vec<f64>], net: &NetSpec, limit: Option<usize>) -> Result<Genotype> {
    let mut g = extract_child(space, alphas)?;
    let Some(limit) = limit else {
        return Ok(g);
    };
    while !check_constraint(g.param_count(net), limit) {
        let victim = g
            .nodes
            .iter()
            .enumerate()
            .flat_map(|(j, edges)| edges.iter().enumerate().map(move |(e, edge)| (j, e, *edge)))
            .filter(|(_, _, edge)| edge.op.is_parametric())
            .min_by(|x, y| {
                let ax = alphas[x.0][x.2.slot()].abs();
                let ay = alphas[y.0][y.2.slot()].abs();
                ax.total_cmp(&ay).then((y.0, y.1).cmp(&(x.0, x.1)))
            });
        let Some((j, e, edge)) = victim else {
            return Err(NasError::Unsatisfiable {
                limit,
                minimum: g.param_count(net),
            });
        };
        let free = [CellOp::MaxPool3, CellOp::AvgPool3, CellOp::Identity];
        let (best, _) = argmax_abs(free.iter().map(|op| alphas[j][CellSpace::slot(edge.pred, *op)]));
        log::debug!("node {}: replacing {} with {} to meet the parameter limit", j + 2, edge.op, free[best]);
        g.nodes[j][e].op = free[best];
    }
    Ok(g)
}
