use crate::error::{Error, Result};
use crate::gates::{GateMode, GumbelInput};

/// How gates are realized across the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingMode {
    /// Data-independent route frozen at construction; network weights still train.
    Static,
    /// Per-token, per-map decisions from the gates.
    Dynamic,
    /// Every path open; gates are never evaluated.
    Fully,
}

impl RoutingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::Static => "static",
            RoutingMode::Dynamic => "dynamic",
            RoutingMode::Fully => "fully",
        }
    }
}

impl std::str::FromStr for RoutingMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "static" => Ok(RoutingMode::Static),
            "dynamic" => Ok(RoutingMode::Dynamic),
            "fully" => Ok(RoutingMode::Fully),
            other => Err(format!("expected static|dynamic|fully, got `{other}`")),
        }
    }
}

impl GateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GateMode::Random => "random",
            GateMode::Attention => "attention",
            GateMode::Learnable => "learnable",
        }
    }
}

impl std::str::FromStr for GateMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(GateMode::Random),
            "attention" => Ok(GateMode::Attention),
            "learnable" => Ok(GateMode::Learnable),
            other => Err(format!("expected random|attention|learnable, got `{other}`")),
        }
    }
}

impl GumbelInput {
    pub fn as_str(self) -> &'static str {
        match self {
            GumbelInput::Logits => "logits",
            GumbelInput::Probs => "probs",
        }
    }
}

impl std::str::FromStr for GumbelInput {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "logits" => Ok(GumbelInput::Logits),
            "probs" => Ok(GumbelInput::Probs),
            other => Err(format!("expected logits|probs, got `{other}`")),
        }
    }
}

/// Shape of the routing space and the routing policy.
#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub levels: usize,
    pub columns: usize,
    pub dims: Vec<usize>,
    pub heads: Vec<usize>,
    pub blocks_per_node: usize,
    pub mlp_ratio: usize,
    pub stem_patch: usize,
    pub image_size: (usize, usize),
    pub channels: usize,
    pub num_classes: usize,
    pub mu: f64,
    pub lambda_c: f64,
    pub gate_mode: GateMode,
    pub routing_mode: RoutingMode,
    /// Row gates learn; when false they are forced open.
    pub dynamic_depth: bool,
    /// Column gates learn; when false they follow the staircase schedule.
    pub dynamic_scale: bool,
    pub tau: f64,
    pub momentum: f64,
    pub gumbel_input: GumbelInput,
    /// Execute probability of a freshly initialized gate.
    pub init_keep_prob: f64,
    /// Std of the initial gate projection.
    pub gate_init_std: f64,
    /// Learning-rate multiplier for row gate projections and biases.
    pub gate_lr_scale: f64,
    /// Learning-rate multiplier for column gate projections and biases.
    pub col_gate_lr_scale: f64,
    /// Row keep probability for random and attention gates.
    pub random_keep_prob: f64,
    /// Column open probability for random and attention gates.
    pub random_col_prob: f64,
}

impl Default for GridConfig {
    /// The desk configuration: 3 levels, 6 columns, 32×32 grayscale, 4 classes.
    fn default() -> Self {
        Self {
            levels: 3,
            columns: 6,
            dims: vec![16, 32, 64],
            heads: vec![1, 2, 4],
            blocks_per_node: 1,
            mlp_ratio: 4,
            stem_patch: 4,
            image_size: (32, 32),
            channels: 1,
            num_classes: 4,
            mu: 0.5,
            lambda_c: 10.0,
            gate_mode: GateMode::Learnable,
            routing_mode: RoutingMode::Dynamic,
            dynamic_depth: true,
            dynamic_scale: true,
            tau: 1.0,
            momentum: 0.99,
            gumbel_input: GumbelInput::Logits,
            init_keep_prob: 0.9,
            gate_init_std: 0.0,
            gate_lr_scale: 30.0,
            col_gate_lr_scale: 1.0,
            random_keep_prob: 0.5,
            random_col_prob: 0.5,
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        line: 0,
        message: message.into(),
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(invalid("levels", "must be ≥ 1"));
        }
        if self.columns < self.levels {
            return Err(invalid("columns", "must be ≥ levels"));
        }
        if self.dims.len() != self.levels {
            return Err(invalid("dims", format!("need {} entries", self.levels)));
        }
        if self.heads.len() != self.levels {
            return Err(invalid("heads", format!("need {} entries", self.levels)));
        }
        if self.dims.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("dims", "must be nondecreasing"));
        }
        for (d, h) in self.dims.iter().zip(&self.heads) {
            if *h == 0 || *d == 0 || d % h != 0 {
                return Err(invalid("heads", format!("{h} heads do not divide width {d}")));
            }
        }
        if self.blocks_per_node == 0 {
            return Err(invalid("blocks_per_node", "must be ≥ 1"));
        }
        if self.mlp_ratio == 0 || self.stem_patch == 0 || self.channels == 0 {
            return Err(invalid("stem_patch", "patch, channels and mlp ratio must be positive"));
        }
        let unit = self.stem_patch << (self.levels - 1);
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(invalid(
                "image_size",
                format!("{h}x{w} not divisible by stem_patch·2^(levels−1) = {unit}"),
            ));
        }
        if self.num_classes == 0 {
            return Err(invalid("num_classes", "must be ≥ 1"));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(invalid("mu", "must lie in (0, 1]"));
        }
        if !(self.lambda_c >= 0.0) {
            return Err(invalid("lambda_c", "must be ≥ 0"));
        }
        if !(self.tau > 0.0) {
            return Err(invalid("tau", "must be > 0"));
        }
        if !(self.gate_lr_scale > 0.0) {
            return Err(invalid("gate_lr_scale", "must be > 0"));
        }
        if !(self.col_gate_lr_scale > 0.0) {
            return Err(invalid("col_gate_lr_scale", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum", "must lie in [0, 1)"));
        }
        for (key, p) in [
            ("init_keep_prob", self.init_keep_prob),
            ("random_keep_prob", self.random_keep_prob),
            ("random_col_prob", self.random_col_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(key, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Spatial extent `(h, w)` of level `i`.
    pub fn level_extent(&self, level: usize) -> (usize, usize) {
        let s = self.stem_patch << level;
        (self.image_size.0 / s, self.image_size.1 / s)
    }

    pub fn level_tokens(&self, level: usize) -> usize {
        let (h, w) = self.level_extent(level);
        h * w
    }

    pub fn node_exists(&self, level: usize, column: usize) -> bool {
        level < self.levels && column < self.columns && column >= level
    }

    /// Node `(i, j)` owns a transformer stage leading to `(i, j+1)`.
    pub fn has_row_edge(&self, level: usize, column: usize) -> bool {
        self.node_exists(level, column) && column + 1 < self.columns
    }

    /// Node `(i, j)` owns a patch embedding leading to `(i+1, j)`.
    pub fn has_col_edge(&self, level: usize, column: usize) -> bool {
        self.node_exists(level, column) && level + 1 < self.levels && column > level
    }

    /// Row edges each level contributes to the canonical one-downsample-per-level path.
    pub fn staircase_row_edges(&self) -> Vec<usize> {
        let n = self.levels;
        let extra = self.columns - n;
        let (base, rem) = (extra / n, extra % n);
        (0..n)
            .map(|i| {
                let mandatory = usize::from(i + 1 < n);
                mandatory + base + usize::from(i >= n - rem)
            })
            .collect()
    }

    /// Column at which the canonical path enters each level.
    pub fn staircase_entry_columns(&self) -> Vec<usize> {
        let edges = self.staircase_row_edges();
        let mut cols = Vec::with_capacity(self.levels);
        let mut c = 0;
        for r in edges {
            cols.push(c);
            c += r;
        }
        cols
    }

    /// Whether the canonical path downsamples out of node `(i, j)`.
    pub fn staircase_col_open(&self, level: usize, column: usize) -> bool {
        level + 1 < self.levels && self.staircase_entry_columns()[level + 1] == column
    }

    /// Whether the canonical path runs the stage out of node `(i, j)`.
    pub fn staircase_row_open(&self, level: usize, column: usize) -> bool {
        let entry = self.staircase_entry_columns();
        let edges = self.staircase_row_edges();
        column >= entry[level] && column < entry[level] + edges[level]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        GridConfig::default().validate().unwrap();
    }

    #[test]
    fn staircase_partitions_the_columns() {
        for levels in 1..=4 {
            for columns in levels..=8 {
                let cfg = GridConfig {
                    levels,
                    columns,
                    dims: vec![8; levels],
                    heads: vec![1; levels],
                    image_size: (4 << (levels - 1), 4 << (levels - 1)),
                    ..GridConfig::default()
                };
                cfg.validate().unwrap();
                let edges = cfg.staircase_row_edges();
                assert_eq!(edges.iter().sum::<usize>(), columns - 1);
                let entry = cfg.staircase_entry_columns();
                for i in 1..levels {
                    assert!(entry[i] >= i, "level {i} entered before it exists");
                    assert!(cfg.has_col_edge(i - 1, entry[i]));
                }
            }
        }
        let desk = GridConfig::default();
        assert_eq!(desk.staircase_row_edges(), vec![2, 2, 1]);
        assert_eq!(desk.staircase_entry_columns(), vec![0, 2, 4]);
    }

    #[test]
    fn rejects_indivisible_image() {
        let cfg = GridConfig {
            image_size: (30, 32),
            ..GridConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "image_size"));
    }

    #[test]
    fn edge_existence() {
        let cfg = GridConfig::default();
        assert!(cfg.has_row_edge(0, 0));
        assert!(!cfg.has_row_edge(0, 5));
        assert!(!cfg.has_col_edge(0, 0));
        assert!(cfg.has_col_edge(0, 1));
        assert!(!cfg.has_col_edge(2, 5));
        assert!(!cfg.node_exists(2, 1));
    }
}
