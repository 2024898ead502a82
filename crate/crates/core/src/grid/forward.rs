//! Column-major sweep over the grid.

use rand::Rng;

use super::{DitModel, RoutingMode};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gates::{attention_mask, random_mask, GateMode, Phase};
use crate::params::Session;
use crate::tensor::Tensor;

use super::layers::Head;

/// What produced a gate decision; determines its price.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateSource {
    /// Linear projection of the response map.
    Learned,
    /// Top-k of the next block's attention.
    Attention,
    /// Bernoulli draw independent of the input.
    Random,
    /// Decided without evaluating anything (forced, scheduled or fully open).
    Fixed,
}

/// A gate decision as it enters composition.
#[derive(Clone, Debug)]
pub struct GateValue {
    /// Exact 0/1 values, `l×1` for rows and `1×1` for columns.
    pub hard: Tensor,
    /// Graph handle numerically equal to `hard`; carries gradient when learned in training.
    pub var: Var,
}

impl GateValue {
    pub fn constant(g: &mut Graph<'_>, hard: Tensor) -> Self {
        let var = g.constant(hard.clone());
        Self { hard, var }
    }

    fn all(&self, v: f64) -> bool {
        self.hard.data().iter().all(|&x| x == v)
    }
}

/// Row contribution into a node: the previous map, its row gate and the stage output.
#[derive(Clone, Copy, Debug)]
pub struct RowInput<'v> {
    pub prev: Var,
    pub gate: &'v GateValue,
    /// `B(G ⊙ prev)`; absent when the stage was skipped.
    pub block_out: Option<Var>,
}

/// Column contribution into a node: the gate and the embedding of the upper map.
#[derive(Clone, Copy, Debug)]
pub struct ColInput<'v> {
    pub gate: &'v GateValue,
    /// `P(F_upper)`; absent when the downsample was skipped.
    pub embed_out: Option<Var>,
}

/// `G ⊙ B(G ⊙ F_prev) + (1 − G) ⊙ F_prev + G_col · P(F_upper)`.
///
/// Constant gates take shortcuts that are bitwise equal to the full formula:
/// an all-open row returns the stage output, an all-closed row returns
/// `F_prev` itself. Returns `None` when no input reaches the node.
pub fn node_aggregate(
    g: &mut Graph<'_>,
    row: Option<RowInput<'_>>,
    col: Option<ColInput<'_>>,
) -> Result<Option<Var>> {
    let mut out = None;
    if let Some(r) = row {
        let learned = g.requires_grad(r.gate.var);
        out = Some(match r.block_out {
            None if r.gate.all(0.0) && !learned => r.prev,
            None => return Err(Error::Contract("row gate open but the stage was skipped".into())),
            Some(b) if r.gate.all(1.0) && !learned => b,
            Some(b) => {
                let kept = g.mul(b, r.gate.var)?;
                let neg = g.scale(r.gate.var, -1.0)?;
                let skip = g.add_scalar(neg, 1.0)?;
                let ident = g.mul(r.prev, skip)?;
                g.add(kept, ident)?
            }
        });
    }
    if let Some(c) = col {
        let open = c.gate.hard.item() == 1.0;
        let learned = g.requires_grad(c.gate.var);
        let term = match c.embed_out {
            Some(e) if open && !learned => Some(e),
            Some(e) => {
                let l = g.value(e).rows();
                let spread = g.gather(c.gate.var, vec![0; l], vec![l, 1])?;
                Some(g.mul(e, spread)?)
            }
            None if open => {
                return Err(Error::Contract("column gate open but the embedding was skipped".into()))
            }
            None => None,
        };
        if let Some(t) = term {
            out = match out {
                Some(o) => Some(g.add(o, t)?),
                None if open => Some(t),
                None => None,
            };
        }
    }
    Ok(out)
}

/// Mean pool of the final map followed by the linear classifier.
pub fn classification_head(s: &mut Session<'_>, head: &Head, last: Option<Var>) -> Result<Var> {
    let x = last.ok_or_else(|| Error::Contract("classification head reached an inactive map".into()))?;
    head.forward(s, x)
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub phase: Phase,
    /// Test hook: every row gate takes this value.
    pub force_row: Option<bool>,
    /// Test hook: every column gate takes this value (the fallback still applies).
    pub force_col: Option<bool>,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self::with_phase(Phase::Train)
    }

    pub fn infer() -> Self {
        Self::with_phase(Phase::Infer)
    }

    pub fn with_phase(phase: Phase) -> Self {
        Self {
            phase,
            force_row: None,
            force_col: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowTrace {
    /// Per-token execute decision.
    pub mask: Vec<bool>,
    pub source: GateSource,
    /// Whether the stage was executed at all.
    pub block_run: bool,
}

impl RowTrace {
    pub fn kept(&self) -> usize {
        self.mask.iter().filter(|&&k| k).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColTrace {
    pub open: bool,
    /// Opened by the fallback rule rather than by the gate.
    pub forced: bool,
    pub source: GateSource,
    pub embed_run: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeTrace {
    pub level: usize,
    pub column: usize,
    pub tokens: usize,
    pub active: bool,
    pub row: Option<RowTrace>,
    pub col: Option<ColTrace>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingTrace {
    pub nodes: Vec<NodeTrace>,
}

impl RoutingTrace {
    pub fn node(&self, level: usize, column: usize) -> Option<&NodeTrace> {
        self.nodes.iter().find(|n| n.level == level && n.column == column)
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Differentiable realized cost in FLOPs.
    pub cost: Var,
    pub trace: RoutingTrace,
    /// Response map of every node in row-major `(level, column)` order.
    pub maps: Vec<Option<Var>>,
}

struct PendingRow {
    prev: Var,
    gate: GateValue,
    block_out: Option<Var>,
}

struct PendingCol {
    gate: GateValue,
    embed_out: Option<Var>,
}

/// Runs the whole grid on one `H×W×C` image.
pub fn grid_forward<R: Rng + ?Sized>(
    model: &DitModel,
    s: &mut Session<'_>,
    image: &Tensor,
    rng: &mut R,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let (n, cols) = (cfg.levels, cfg.columns);
    let (ih, iw) = cfg.image_size;
    if image.shape() != [ih, iw, cfg.channels] {
        return Err(Error::shape("grid_forward", image.shape(), &[ih, iw, cfg.channels]));
    }
    let train = opts.phase == Phase::Train;
    let img = s.graph.constant(image.clone());
    let stem = model.stem.forward(s, img)?;

    let mut maps: Vec<Option<Var>> = vec![None; n * cols];
    let mut rows: Vec<Option<PendingRow>> = (0..n).map(|_| None).collect();
    let mut down: Vec<Option<PendingCol>> = (0..n).map(|_| None).collect();
    let mut trace = RoutingTrace::default();
    let mut cost_const = (model.costs.stem + model.costs.head) as f64;
    let mut cost_terms: Vec<Var> = Vec::new();

    for j in 0..cols {
        for i in 0..n.min(j + 1) {
            let row_in = rows[i].take();
            let col_in = down[i].take();
            let f = if (i, j) == (0, 0) {
                Some(stem)
            } else {
                node_aggregate(
                    &mut s.graph,
                    row_in.as_ref().map(|r| RowInput {
                        prev: r.prev,
                        gate: &r.gate,
                        block_out: r.block_out,
                    }),
                    col_in.as_ref().map(|c| ColInput {
                        gate: &c.gate,
                        embed_out: c.embed_out,
                    }),
                )?
            };
            maps[i * cols + j] = f;
            let tokens = cfg.level_tokens(i);
            let mut nt = NodeTrace {
                level: i,
                column: j,
                tokens,
                active: f.is_some(),
                row: None,
                col: None,
            };
            let Some(f) = f else {
                trace.nodes.push(nt);
                continue;
            };
            let node = model.node(i, j).expect("node exists");
            let lc = &model.costs.levels[i];

            if let Some(stage) = &node.stage {
                let (gate, source) = row_gate(model, s, i, j, f, rng, opts)?;
                cost_const += model.costs.gate_cost(i, source, true) as f64;
                let learned = s.graph.requires_grad(gate.var);
                let closed = gate.all(0.0);
                let block_out = if closed && !learned {
                    None
                } else {
                    let x = if gate.all(1.0) && !learned {
                        f
                    } else {
                        s.graph.mul(f, gate.var)?
                    };
                    Some(stage.forward(s, x)?)
                };
                let kept = gate.hard.data().iter().filter(|&&v| v == 1.0).count();
                if learned {
                    let frac = s.graph.mean(gate.var)?;
                    cost_terms.push(s.graph.scale(frac, lc.c_row as f64)?);
                } else {
                    cost_const += (kept as u64 * (lc.c_row / tokens as u64)) as f64;
                }
                nt.row = Some(RowTrace {
                    mask: gate.hard.data().iter().map(|&v| v == 1.0).collect(),
                    source,
                    block_run: block_out.is_some(),
                });
                rows[i] = Some(PendingRow {
                    prev: f,
                    gate,
                    block_out,
                });
            }

            if let Some(embed) = &node.embed {
                // the deepest reachable column: keep level i+1 alive for the head
                let starving = j + 1 == cols && rows[i + 1].is_none();
                let (gate, source) = if starving {
                    (GateValue::constant(&mut s.graph, Tensor::full(&[1, 1], 1.0)), GateSource::Fixed)
                } else {
                    col_gate(model, s, i, j, f, rng, opts)?
                };
                cost_const += model.costs.gate_cost(i, source, false) as f64;
                let open = gate.hard.item() == 1.0;
                let learned = s.graph.requires_grad(gate.var);
                let run = open || (train && learned && rows[i + 1].is_some());
                let embed_out = if run {
                    let (h, w) = cfg.level_extent(i);
                    Some(embed.forward(s, f, h, w)?)
                } else {
                    None
                };
                if learned {
                    let v = s.graph.mean(gate.var)?;
                    cost_terms.push(s.graph.scale(v, lc.c_col as f64)?);
                } else if open {
                    cost_const += lc.c_col as f64;
                }
                nt.col = Some(ColTrace {
                    open,
                    forced: starving,
                    source,
                    embed_run: embed_out.is_some(),
                });
                down[i + 1] = Some(PendingCol { gate, embed_out });
            }
            trace.nodes.push(nt);
        }
    }

    let last = maps[(n - 1) * cols + cols - 1];
    let logits = classification_head(s, &model.head, last)?;
    let mut cost = s.graph.constant(Tensor::scalar(cost_const));
    for t in cost_terms {
        cost = s.graph.add(cost, t)?;
    }
    Ok(ForwardOutput {
        logits,
        cost,
        trace,
        maps,
    })
}

fn row_gate<R: Rng + ?Sized>(
    model: &DitModel,
    s: &mut Session<'_>,
    i: usize,
    j: usize,
    f: Var,
    rng: &mut R,
    opts: &ForwardOptions,
) -> Result<(GateValue, GateSource)> {
    let cfg = &model.config;
    let l = cfg.level_tokens(i);
    let fixed = |s: &mut Session<'_>, open: bool| {
        let v = if open { 1.0 } else { 0.0 };
        (GateValue::constant(&mut s.graph, Tensor::full(&[l, 1], v)), GateSource::Fixed)
    };
    if let Some(open) = opts.force_row {
        return Ok(fixed(s, open));
    }
    if cfg.routing_mode == RoutingMode::Fully || !cfg.dynamic_depth {
        return Ok(fixed(s, true));
    }
    let node = model.node(i, j).expect("node exists");
    let gate = node.row_gate.as_ref().expect("row edge has a gate");
    if cfg.routing_mode == RoutingMode::Static {
        let d = gate.row_forward(s, f, rng, Phase::Infer)?;
        return Ok((GateValue { hard: d.hard, var: d.value }, GateSource::Learned));
    }
    match cfg.gate_mode {
        GateMode::Learnable => {
            let d = gate.row_forward(s, f, rng, opts.phase)?;
            Ok((GateValue { hard: d.hard, var: d.value }, GateSource::Learned))
        }
        GateMode::Random => {
            let hard = random_mask(l, cfg.random_keep_prob, rng);
            Ok((GateValue::constant(&mut s.graph, hard), GateSource::Random))
        }
        GateMode::Attention => {
            let stage = node.stage.as_ref().expect("row edge has a stage");
            let attn = stage.blocks[0].attention_map(s, f)?;
            let hard = attention_mask(Some(&attn), cfg.random_keep_prob)?;
            Ok((GateValue::constant(&mut s.graph, hard), GateSource::Attention))
        }
    }
}

fn col_gate<R: Rng + ?Sized>(
    model: &DitModel,
    s: &mut Session<'_>,
    i: usize,
    j: usize,
    f: Var,
    rng: &mut R,
    opts: &ForwardOptions,
) -> Result<(GateValue, GateSource)> {
    let cfg = &model.config;
    let fixed = |s: &mut Session<'_>, open: bool| {
        let v = if open { 1.0 } else { 0.0 };
        (GateValue::constant(&mut s.graph, Tensor::full(&[1, 1], v)), GateSource::Fixed)
    };
    if let Some(open) = opts.force_col {
        return Ok(fixed(s, open));
    }
    if cfg.routing_mode == RoutingMode::Fully {
        return Ok(fixed(s, true));
    }
    if !cfg.dynamic_scale {
        return Ok(fixed(s, cfg.staircase_col_open(i, j)));
    }
    let node = model.node(i, j).expect("node exists");
    let gate = node.col_gate.as_ref().expect("column edge has a gate");
    if cfg.routing_mode == RoutingMode::Static {
        let d = gate.col_forward(s, f, rng, Phase::Infer)?;
        return Ok((GateValue { hard: d.hard, var: d.value }, GateSource::Learned));
    }
    match cfg.gate_mode {
        GateMode::Learnable => {
            let d = gate.col_forward(s, f, rng, opts.phase)?;
            Ok((GateValue { hard: d.hard, var: d.value }, GateSource::Learned))
        }
        GateMode::Random | GateMode::Attention => {
            let hard = random_mask(1, cfg.random_col_prob, rng);
            Ok((GateValue::constant(&mut s.graph, hard), GateSource::Random))
        }
    }
}

/// The fully-open grid written without any gating: `F = B(F_prev) + P(F_upper)`.
pub fn full_grid_reference(model: &DitModel, s: &mut Session<'_>, image: &Tensor) -> Result<Var> {
    let cfg = &model.config;
    let (n, cols) = (cfg.levels, cfg.columns);
    let img = s.graph.constant(image.clone());
    let mut maps: Vec<Option<Var>> = vec![None; n * cols];
    for j in 0..cols {
        for i in 0..n.min(j + 1) {
            let f = if (i, j) == (0, 0) {
                model.stem.forward(s, img)?
            } else {
                let from_left = match (j > i, j.checked_sub(1)) {
                    (true, Some(p)) => {
                        let prev = maps[i * cols + p].expect("left neighbour computed");
                        let stage = model.node(i, p).and_then(|nd| nd.stage.as_ref()).expect("stage");
                        Some(stage.forward(s, prev)?)
                    }
                    _ => None,
                };
                let from_above = if i > 0 && cfg.has_col_edge(i - 1, j) {
                    let upper = maps[(i - 1) * cols + j].expect("upper computed");
                    let embed = model.node(i - 1, j).and_then(|nd| nd.embed.as_ref()).expect("embed");
                    let (h, w) = cfg.level_extent(i - 1);
                    Some(embed.forward(s, upper, h, w)?)
                } else {
                    None
                };
                match (from_left, from_above) {
                    (Some(a), Some(b)) => s.graph.add(a, b)?,
                    (Some(a), None) => a,
                    (None, Some(b)) => b,
                    (None, None) => return Err(Error::Contract(format!("node ({i},{j}) unreachable"))),
                }
            };
            maps[i * cols + j] = Some(f);
        }
    }
    model.head.forward(s, maps[(n - 1) * cols + cols - 1].expect("final map"))
}
