//! FLOPs accounting for the routing space.
//!
//! All costs are FLOPs with one multiply-accumulate counted as 2 FLOPs, and
//! only matmuls are priced: softmax, normalization, GELU, pooling and
//! residual adds are free. The stem and the head run unconditionally and are
//! included in both the realized cost and the baseline.
//!
//! Per node `(i, j)` the realized stage cost is
//! `Ḡ_row · C_row + G_col · C_col + C_gates`, where `Ḡ_row` is the fraction
//! of tokens sent through the transformer stage. The idealized price treats
//! skipped tokens as free; the dense kernel still multiplies them, and the
//! difference is reported separately as masked-row FLOPs.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::grid::{GateSource, GridConfig, RoutingTrace};

/// A priced network component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    /// `l×d_in → l×d_out` projection.
    Linear { l: usize, d_in: usize, d_out: usize },
    /// Attention scores plus the weighted sum of values, summed over heads.
    Attention { l: usize, d: usize },
    /// One pre-LN block: QKV, attention, output projection, two-layer MLP.
    Block { l: usize, d: usize, mlp_ratio: usize },
    /// 2×2 patch merge from `l_in` tokens of width `d_in` to `d_out`.
    Embed { l_in: usize, d_in: usize, d_out: usize },
    RowGate { l: usize, d: usize },
    ColGate { d: usize },
    /// LN + QKV + scores of the next block, used by attention-mode gates.
    AttentionProbe { l: usize, d: usize },
}

pub fn analytic_flops(c: Component) -> u64 {
    let lin = |l: usize, a: usize, b: usize| 2 * (l * a * b) as u64;
    match c {
        Component::Linear { l, d_in, d_out } => lin(l, d_in, d_out),
        Component::Attention { l, d } => 2 * 2 * (l * l * d) as u64,
        Component::Block { l, d, mlp_ratio } => {
            lin(l, d, 3 * d)
                + analytic_flops(Component::Attention { l, d })
                + lin(l, d, d)
                + lin(l, d, mlp_ratio * d)
                + lin(l, mlp_ratio * d, d)
        }
        Component::Embed { l_in, d_in, d_out } => lin(l_in / 4, 4 * d_in, d_out),
        Component::RowGate { l, d } => lin(l, d, 2),
        // mean pooling is not a matmul
        Component::ColGate { d } => lin(1, d, 2),
        Component::AttentionProbe { l, d } => lin(l, d, 3 * d) + 2 * (l * l * d) as u64,
    }
}

/// `Ḡ_row · C_row + G_col · C_col + C_gates`.
pub fn stage_cost(g_row: f64, g_col: f64, c_row: f64, c_col: f64, c_gates: f64) -> f64 {
    g_row * c_row + g_col * c_col + c_gates
}

/// `(C_space / C_base − μ)²` on the graph.
pub fn budget_loss(g: &mut Graph<'_>, c_space: Var, c_base: f64, mu: f64) -> Result<Var> {
    if !(c_base > 0.0) {
        return Err(Error::Contract(format!("baseline cost must be positive, got {c_base}")));
    }
    // offset before scaling so the loss is exactly zero at μ·C_base
    let offset = g.add_scalar(c_space, -mu * c_base)?;
    let dev = g.scale(offset, 1.0 / c_base)?;
    g.mul(dev, dev)
}

/// Analytic per-level prices for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelCost {
    pub tokens: usize,
    pub dim: usize,
    /// All blocks of one stage at this level.
    pub c_row: u64,
    /// Patch embedding into the next level; 0 at the deepest level.
    pub c_col: u64,
    pub row_gate: u64,
    pub col_gate: u64,
    pub probe: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    pub levels: Vec<LevelCost>,
    pub stem: u64,
    pub head: u64,
}

impl CostModel {
    pub fn new(cfg: &GridConfig) -> Self {
        let levels = (0..cfg.levels)
            .map(|i| {
                let l = cfg.level_tokens(i);
                let d = cfg.dims[i];
                let block = analytic_flops(Component::Block {
                    l,
                    d,
                    mlp_ratio: cfg.mlp_ratio,
                });
                let c_col = if i + 1 < cfg.levels {
                    analytic_flops(Component::Embed {
                        l_in: l,
                        d_in: d,
                        d_out: cfg.dims[i + 1],
                    })
                } else {
                    0
                };
                LevelCost {
                    tokens: l,
                    dim: d,
                    c_row: block * cfg.blocks_per_node as u64,
                    c_col,
                    row_gate: analytic_flops(Component::RowGate { l, d }),
                    col_gate: analytic_flops(Component::ColGate { d }),
                    probe: analytic_flops(Component::AttentionProbe { l, d }),
                }
            })
            .collect();
        let p = cfg.stem_patch;
        Self {
            levels,
            stem: analytic_flops(Component::Linear {
                l: cfg.level_tokens(0),
                d_in: p * p * cfg.channels,
                d_out: cfg.dims[0],
            }),
            head: analytic_flops(Component::Linear {
                l: 1,
                d_in: cfg.dims[cfg.levels - 1],
                d_out: cfg.num_classes,
            }),
        }
    }

    /// Cost of the canonical staircase path: every stage on it executed, one
    /// downsample per level transition, gates excluded, stem and head included.
    pub fn baseline(&self, cfg: &GridConfig) -> u64 {
        let edges = cfg.staircase_row_edges();
        let mut total = self.stem + self.head;
        for (i, lc) in self.levels.iter().enumerate() {
            total += edges[i] as u64 * lc.c_row;
            if i + 1 < cfg.levels {
                total += lc.c_col;
            }
        }
        total
    }

    /// Cost with every node active and every path open, gates not evaluated.
    pub fn fully_open(&self, cfg: &GridConfig) -> u64 {
        let mut total = self.stem + self.head;
        for i in 0..cfg.levels {
            for j in 0..cfg.columns {
                if cfg.has_row_edge(i, j) {
                    total += self.levels[i].c_row;
                }
                if cfg.has_col_edge(i, j) {
                    total += self.levels[i].c_col;
                }
            }
        }
        total
    }

    pub fn gate_cost(&self, level: usize, source: GateSource, row: bool) -> u64 {
        let lc = &self.levels[level];
        match (source, row) {
            (GateSource::Learned, true) => lc.row_gate,
            (GateSource::Learned, false) => lc.col_gate,
            (GateSource::Attention, true) => lc.probe,
            _ => 0,
        }
    }
}

/// Realized cost of one node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeCost {
    pub level: usize,
    pub column: usize,
    pub c_row: u64,
    pub c_col: u64,
    pub c_gates: u64,
    /// Fraction of tokens through the stage; 0 without a stage.
    pub g_row_mean: f64,
    pub g_col: f64,
    /// Idealized stage cost with skipped tokens free.
    pub cost: f64,
    /// FLOPs the dense kernel spent on masked rows.
    pub masked_row_flops: f64,
    /// FLOPs spent on a closed downsample kept for its gradient (training only).
    pub closed_col_flops: f64,
}

/// Per-node and total costs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CostLedger {
    pub nodes: Vec<NodeCost>,
    pub stem: u64,
    pub head: u64,
    pub c_base: f64,
    /// Stem + head + Σ stage costs.
    pub c_space: f64,
    pub mu: f64,
    pub realized_ratio: f64,
}

impl CostLedger {
    pub fn from_trace(cm: &CostModel, cfg: &GridConfig, trace: &RoutingTrace) -> Self {
        let mut nodes = Vec::new();
        let mut c_space = (cm.stem + cm.head) as f64;
        for nt in trace.nodes.iter().filter(|n| n.active) {
            let lc = &cm.levels[nt.level];
            let mut c_gates = 0;
            let (mut g_row_mean, mut row_ideal, mut masked) = (0.0, 0.0, 0.0);
            let mut c_row = 0;
            if let Some(rt) = &nt.row {
                c_row = lc.c_row;
                c_gates += cm.gate_cost(nt.level, rt.source, true);
                let kept = rt.kept() as u64;
                let l = nt.tokens as u64;
                debug_assert_eq!(lc.c_row % l, 0);
                let per_token = lc.c_row / l;
                g_row_mean = kept as f64 / l as f64;
                row_ideal = (kept * per_token) as f64;
                if rt.block_run {
                    masked = ((l - kept) * per_token) as f64;
                }
            }
            let (mut c_col, mut g_col, mut col_cost, mut closed) = (0, 0.0, 0.0, 0.0);
            if let Some(ct) = &nt.col {
                c_col = lc.c_col;
                c_gates += cm.gate_cost(nt.level, ct.source, false);
                if ct.open {
                    g_col = 1.0;
                    col_cost = c_col as f64;
                } else if ct.embed_run {
                    closed = c_col as f64;
                }
            }
            let cost = row_ideal + col_cost + c_gates as f64;
            c_space += cost;
            nodes.push(NodeCost {
                level: nt.level,
                column: nt.column,
                c_row,
                c_col,
                c_gates,
                g_row_mean,
                g_col,
                cost,
                masked_row_flops: masked,
                closed_col_flops: closed,
            });
        }
        let c_base = cm.baseline(cfg) as f64;
        Self {
            nodes,
            stem: cm.stem,
            head: cm.head,
            c_base,
            c_space,
            mu: cfg.mu,
            realized_ratio: c_space / c_base,
        }
    }

    /// Dense-kernel FLOPs minus the idealized price.
    pub fn discrepancy(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.masked_row_flops + n.closed_col_flops)
            .sum()
    }

    pub fn masked_row_flops(&self) -> f64 {
        self.nodes.iter().map(|n| n.masked_row_flops).sum()
    }
}
