//! Line-based `key = value` run configuration.
//!
//! `#` starts a comment, blank lines are ignored, unknown keys are rejected
//! with their line number, and missing keys keep their defaults. Lists are
//! comma-separated; the image size is written `HxW`.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub train: TrainConfig,
    /// Seeds initialization and Gumbel noise.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_scalar<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("cannot parse `{value}`: {e}"))
}

fn parse_list(value: &str) -> std::result::Result<Vec<usize>, String> {
    value.split(',').map(|v| parse_scalar(v.trim())).collect()
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(format!("expected true|false, got `{other}`")),
    }
}

impl RunConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let g = &self.grid;
        let t = &self.train;
        vec![
            ("seed", self.seed.to_string()),
            ("levels", g.levels.to_string()),
            ("columns", g.columns.to_string()),
            ("dims", list(&g.dims)),
            ("heads", list(&g.heads)),
            ("blocks_per_node", g.blocks_per_node.to_string()),
            ("mlp_ratio", g.mlp_ratio.to_string()),
            ("stem_patch", g.stem_patch.to_string()),
            ("image_size", format!("{}x{}", g.image_size.0, g.image_size.1)),
            ("channels", g.channels.to_string()),
            ("num_classes", g.num_classes.to_string()),
            ("mu", g.mu.to_string()),
            ("lambda_c", g.lambda_c.to_string()),
            ("gate_mode", g.gate_mode.as_str().to_string()),
            ("routing_mode", g.routing_mode.as_str().to_string()),
            ("dynamic_depth", g.dynamic_depth.to_string()),
            ("dynamic_scale", g.dynamic_scale.to_string()),
            ("tau", g.tau.to_string()),
            ("momentum", g.momentum.to_string()),
            ("gumbel_input", g.gumbel_input.as_str().to_string()),
            ("init_keep_prob", g.init_keep_prob.to_string()),
            ("gate_init_std", g.gate_init_std.to_string()),
            ("gate_lr_scale", g.gate_lr_scale.to_string()),
            ("col_gate_lr_scale", g.col_gate_lr_scale.to_string()),
            ("random_keep_prob", g.random_keep_prob.to_string()),
            ("random_col_prob", g.random_col_prob.to_string()),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("train_size", t.train_size.to_string()),
            ("test_size", t.test_size.to_string()),
            ("data_seed", t.data_seed.to_string()),
            ("noise_std", t.noise_std.to_string()),
            ("scale_min", t.scale_min.to_string()),
            ("scale_max", t.scale_max.to_string()),
            ("eval_gating", t.eval_gating.as_str().to_string()),
            ("tau_anneal", t.tau_anneal.to_string()),
            ("threads", t.threads.to_string()),
        ]
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let g = &mut self.grid;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_scalar(value)?,
            "levels" => g.levels = parse_scalar(value)?,
            "columns" => g.columns = parse_scalar(value)?,
            "dims" => g.dims = parse_list(value)?,
            "heads" => g.heads = parse_list(value)?,
            "blocks_per_node" => g.blocks_per_node = parse_scalar(value)?,
            "mlp_ratio" => g.mlp_ratio = parse_scalar(value)?,
            "stem_patch" => g.stem_patch = parse_scalar(value)?,
            "image_size" => {
                let (h, w) = value
                    .split_once('x')
                    .ok_or_else(|| format!("expected HxW, got `{value}`"))?;
                g.image_size = (parse_scalar(h.trim())?, parse_scalar(w.trim())?);
            }
            "channels" => g.channels = parse_scalar(value)?,
            "num_classes" => g.num_classes = parse_scalar(value)?,
            "mu" => g.mu = parse_scalar(value)?,
            "lambda_c" => g.lambda_c = parse_scalar(value)?,
            "gate_mode" => g.gate_mode = value.parse()?,
            "routing_mode" => g.routing_mode = value.parse()?,
            "dynamic_depth" => g.dynamic_depth = parse_bool(value)?,
            "dynamic_scale" => g.dynamic_scale = parse_bool(value)?,
            "tau" => g.tau = parse_scalar(value)?,
            "momentum" => g.momentum = parse_scalar(value)?,
            "gumbel_input" => g.gumbel_input = value.parse()?,
            "init_keep_prob" => g.init_keep_prob = parse_scalar(value)?,
            "gate_init_std" => g.gate_init_std = parse_scalar(value)?,
            "gate_lr_scale" => g.gate_lr_scale = parse_scalar(value)?,
            "col_gate_lr_scale" => g.col_gate_lr_scale = parse_scalar(value)?,
            "random_keep_prob" => g.random_keep_prob = parse_scalar(value)?,
            "random_col_prob" => g.random_col_prob = parse_scalar(value)?,
            "steps" => t.steps = parse_scalar(value)?,
            "batch_size" => t.batch_size = parse_scalar(value)?,
            "warmup_steps" => t.warmup_steps = parse_scalar(value)?,
            "lr" => t.lr = parse_scalar(value)?,
            "weight_decay" => t.weight_decay = parse_scalar(value)?,
            "eval_every" => t.eval_every = parse_scalar(value)?,
            "train_size" => t.train_size = parse_scalar(value)?,
            "test_size" => t.test_size = parse_scalar(value)?,
            "data_seed" => t.data_seed = parse_scalar(value)?,
            "noise_std" => t.noise_std = parse_scalar(value)?,
            "scale_min" => t.scale_min = parse_scalar(value)?,
            "scale_max" => t.scale_max = parse_scalar(value)?,
            "eval_gating" => t.eval_gating = value.parse()?,
            "tau_anneal" => t.tau_anneal = parse_bool(value)?,
            "threads" => t.threads = parse_scalar(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                key: content.to_string(),
                line,
                message: "expected key = value".into(),
            })?;
            let key = key.trim();
            cfg.set(key, value.trim()).map_err(|message| Error::Config {
                key: key.to_string(),
                line,
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.train.dataset(&self.grid).validate().map_err(|e| Error::Config {
            key: "dataset".into(),
            line: 0,
            message: e.to_string(),
        })?;
        if self.grid.channels != 1 {
            return Err(Error::Config {
                key: "channels".into(),
                line: 0,
                message: "the synthetic dataset is grayscale".into(),
            });
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config {
                key: "batch_size".into(),
                line: 0,
                message: "must be ≥ 1".into(),
            });
        }
        Ok(())
    }

    /// Canonical text: one `key = value` line per key.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First key whose value differs from `other`.
    pub fn first_difference(&self, other: &RunConfig) -> Option<&'static str> {
        self.entries()
            .into_iter()
            .zip(other.entries())
            .find(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
    }
}
