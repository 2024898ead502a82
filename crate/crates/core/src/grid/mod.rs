//! The grid-shaped routing space.
//!
//! Node `(i, j)` holds the response map at level `i` (resolution
//! `1/(stem_patch·2^i)`) and column `j`. Level `i` exists from column `i`
//! onward. A node owns up to two outgoing paths: a transformer stage to
//! `(i, j+1)` guarded by a per-token row gate, and a patch embedding to
//! `(i+1, j)` guarded by a per-map column gate. Every node also forwards
//! its tokens along the identity mapping wherever the row gate is closed.

mod config;
mod forward;
pub mod layers;

pub use config::{GridConfig, RoutingMode};
pub use forward::{
    classification_head, full_grid_reference, grid_forward, node_aggregate, ColInput, ColTrace,
    ForwardOptions, ForwardOutput, GateSource, GateValue, NodeTrace, RoutingTrace, RowInput,
    RowTrace,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost::CostModel;
use crate::error::Result;
use crate::gates::{keep_logit, GateKind, RoutingGate};
use crate::params::{ParamStore, Session};
use layers::{Block, Head, LayerNorm, Linear, PatchEmbed, Stage, Stem};

/// Logit magnitude pinning a frozen static gate open or shut.
const STATIC_GATE_LOGIT: f64 = 20.0;

#[derive(Clone, Debug)]
pub struct GridNode {
    pub level: usize,
    pub column: usize,
    pub stage: Option<Stage>,
    pub embed: Option<PatchEmbed>,
    pub row_gate: Option<RoutingGate>,
    pub col_gate: Option<RoutingGate>,
}

#[derive(Clone, Debug)]
pub struct DitModel {
    pub config: GridConfig,
    pub store: ParamStore,
    pub stem: Stem,
    pub head: Head,
    nodes: Vec<Option<GridNode>>,
    pub costs: CostModel,
}

impl DitModel {
    pub fn new(config: GridConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = config.stem_patch;
        let stem = Stem {
            proj: Linear::init(&mut store, "stem", p * p * config.channels, config.dims[0], &mut rng),
            patch: p,
        };
        let gates_trainable = config.routing_mode == RoutingMode::Dynamic;
        let mut nodes = Vec::with_capacity(config.levels * config.columns);
        for i in 0..config.levels {
            for j in 0..config.columns {
                if !config.node_exists(i, j) {
                    nodes.push(None);
                    continue;
                }
                let name = format!("node.{i}.{j}");
                let (mut stage, mut embed, mut row_gate, mut col_gate) = (None, None, None, None);
                if config.has_row_edge(i, j) {
                    let blocks = (0..config.blocks_per_node)
                        .map(|k| {
                            Block::init(
                                &mut store,
                                &format!("{name}.block{k}"),
                                config.dims[i],
                                config.heads[i],
                                config.mlp_ratio,
                                &mut rng,
                            )
                        })
                        .collect();
                    stage = Some(Stage { blocks });
                    row_gate = Some(Self::make_gate(
                        &config,
                        &mut store,
                        &format!("{name}.row_gate"),
                        GateKind::Row,
                        config.dims[i],
                        gates_trainable,
                        &mut rng,
                    ));
                }
                if config.has_col_edge(i, j) {
                    embed = Some(PatchEmbed::init(
                        &mut store,
                        &format!("{name}.embed"),
                        config.dims[i],
                        config.dims[i + 1],
                        &mut rng,
                    ));
                    col_gate = Some(Self::make_gate(
                        &config,
                        &mut store,
                        &format!("{name}.col_gate"),
                        GateKind::Col,
                        config.dims[i],
                        gates_trainable,
                        &mut rng,
                    ));
                }
                nodes.push(Some(GridNode {
                    level: i,
                    column: j,
                    stage,
                    embed,
                    row_gate,
                    col_gate,
                }));
            }
        }
        let last = config.dims[config.levels - 1];
        let head = Head {
            norm: LayerNorm::init(&mut store, "head.norm", last),
            proj: Linear::init(&mut store, "head", last, config.num_classes, &mut rng),
        };
        let costs = CostModel::new(&config);
        let mut model = Self {
            config,
            store,
            stem,
            head,
            nodes,
            costs,
        };
        if model.config.routing_mode == RoutingMode::Static {
            model.freeze_static_route();
        }
        Ok(model)
    }

    fn make_gate(
        cfg: &GridConfig,
        store: &mut ParamStore,
        name: &str,
        kind: GateKind,
        dim: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> RoutingGate {
        let mut g = RoutingGate::init(
            store,
            name,
            kind,
            dim,
            cfg.init_keep_prob,
            cfg.gate_init_std,
            trainable,
            rng,
        );
        let scale = match kind {
            GateKind::Row => cfg.gate_lr_scale,
            GateKind::Col => cfg.col_gate_lr_scale,
        };
        for id in [g.w, g.b] {
            store.get_mut(id).lr_scale = scale;
        }
        g.momentum = cfg.momentum;
        g.tau = cfg.tau;
        g.noise_on = cfg.gumbel_input;
        g
    }

    pub fn node(&self, level: usize, column: usize) -> Option<&GridNode> {
        if level >= self.config.levels || column >= self.config.columns {
            return None;
        }
        self.nodes[level * self.config.columns + column].as_ref()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GridNode> {
        self.nodes.iter().flatten()
    }

    pub fn gates(&self) -> impl Iterator<Item = &RoutingGate> {
        self.nodes()
            .flat_map(|n| n.row_gate.iter().chain(n.col_gate.iter()))
    }

    pub fn gates_mut(&mut self) -> impl Iterator<Item = &mut RoutingGate> {
        self.nodes
            .iter_mut()
            .flatten()
            .flat_map(|n| n.row_gate.iter_mut().chain(n.col_gate.iter_mut()))
    }

    /// `ŵ ← m·ŵ + (1−m)·w` on every trainable gate.
    pub fn momentum_update(&mut self) {
        let gates: Vec<RoutingGate> = self.gates().cloned().collect();
        for g in gates {
            if self.store.get(g.w).trainable {
                g.momentum_update(&mut self.store);
            }
        }
    }

    pub fn set_tau(&mut self, tau: f64) {
        for g in self.gates_mut() {
            g.tau = tau;
        }
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(&self.store)
    }

    /// Total parameter count, gate averages excluded.
    pub fn parameter_count(&self) -> usize {
        self.store.count(|p| !p.name.ends_with("_hat"))
    }

    /// Parameters owned by node `(i, j)`, gate averages excluded.
    pub fn node_parameter_count(&self, level: usize, column: usize) -> usize {
        let prefix = format!("node.{level}.{column}.");
        self.store
            .count(|p| p.name.starts_with(&prefix) && !p.name.ends_with("_hat"))
    }

    /// Closes whole stages of the staircase path, one at a time, while that
    /// moves the realized ratio closer to `mu`.
    pub fn static_route(&self) -> Vec<(usize, usize, bool, bool)> {
        let cfg = &self.config;
        let cm = &self.costs;
        let base = cm.baseline(cfg) as f64;
        let mut row_open: Vec<(usize, usize)> = Vec::new();
        let mut fixed = (cm.stem + cm.head) as f64;
        for i in 0..cfg.levels {
            for j in 0..cfg.columns {
                if cfg.has_row_edge(i, j) && cfg.staircase_row_open(i, j) {
                    row_open.push((i, j));
                }
                if cfg.has_col_edge(i, j) && cfg.staircase_col_open(i, j) {
                    fixed += cm.levels[i].c_col as f64;
                }
            }
        }
        // gates at every node that becomes active on the staircase
        let entry = cfg.staircase_entry_columns();
        for i in 0..cfg.levels {
            for j in entry[i]..cfg.columns {
                if cfg.has_row_edge(i, j) {
                    fixed += cm.levels[i].row_gate as f64;
                }
                if cfg.has_col_edge(i, j) {
                    fixed += cm.levels[i].col_gate as f64;
                }
            }
        }
        let ratio = |open: &[(usize, usize)]| {
            let stages: f64 = open.iter().map(|&(i, _)| cm.levels[i].c_row as f64).sum();
            (fixed + stages) / base
        };
        loop {
            let current = (ratio(&row_open) - cfg.mu).abs();
            let best = (0..row_open.len())
                .map(|k| {
                    let mut trial = row_open.clone();
                    trial.remove(k);
                    ((ratio(&trial) - cfg.mu).abs(), k)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            match best {
                Some((dev, k)) if dev < current => {
                    row_open.remove(k);
                }
                _ => break,
            }
        }
        let mut route = Vec::new();
        for i in 0..cfg.levels {
            for j in 0..cfg.columns {
                if cfg.node_exists(i, j) {
                    let row = row_open.contains(&(i, j));
                    let col = cfg.has_col_edge(i, j) && cfg.staircase_col_open(i, j);
                    route.push((i, j, row, col));
                }
            }
        }
        route
    }

    fn freeze_static_route(&mut self) {
        let route = self.static_route();
        for (i, j, row, col) in route {
            let node = self.nodes[i * self.config.columns + j].clone().expect("exists");
            for (gate, open) in [(node.row_gate, row), (node.col_gate, col)] {
                if let Some(g) = gate {
                    let logit = if open { STATIC_GATE_LOGIT } else { -STATIC_GATE_LOGIT };
                    for id in [g.w, g.w_hat] {
                        self.store.value_mut(id).data_mut().fill(0.0);
                    }
                    for id in [g.b, g.b_hat] {
                        self.store.value_mut(id).data_mut().copy_from_slice(&[logit, 0.0]);
                    }
                }
            }
        }
    }

    /// Gate bias logit matching `keep_prob`; exposed for tests.
    pub fn keep_bias(keep_prob: f64) -> f64 {
        keep_logit(keep_prob)
    }
}
