//! Joint objective, training loop, evaluation and routing statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost::{budget_loss, CostLedger};
use crate::data::{scale_bin, DatasetParams, Sample, SyntheticDataset, SCALE_BINS};
use crate::error::{Error, Result};
use crate::gates::Phase;
use crate::grid::{grid_forward, DitModel, ForwardOptions, GridConfig, RoutingTrace};
use crate::optim::{annealed_tau, cosine_lr, AdamW};
use crate::params::{GradBuffer, Session};
use crate::tensor::Tensor;

/// Stream ids separating the RNG uses derived from one seed.
const TRAIN_STREAM: u64 = 1 << 48;
const EVAL_STREAM: u64 = 2 << 48;

/// How gates decide during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalGating {
    /// Argmax of the averaged-weight probabilities.
    Argmax,
    /// Gumbel sample from the averaged-weight probabilities.
    Sample,
}

impl EvalGating {
    pub fn phase(self) -> Phase {
        match self {
            EvalGating::Argmax => Phase::Infer,
            EvalGating::Sample => Phase::Sample,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalGating::Argmax => "argmax",
            EvalGating::Sample => "sample",
        }
    }
}

impl std::str::FromStr for EvalGating {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "argmax" => Ok(EvalGating::Argmax),
            "sample" => Ok(EvalGating::Sample),
            other => Err(format!("expected argmax|sample, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    /// Distinct training images cycled through; 0 draws a fresh image every time.
    pub train_size: usize,
    pub test_size: usize,
    pub data_seed: u64,
    pub noise_std: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub eval_gating: EvalGating,
    /// Anneal the Gumbel temperature linearly over training instead of holding it fixed.
    pub tau_anneal: bool,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            warmup_steps: 100,
            lr: 1e-3,
            weight_decay: 5e-2,
            eval_every: 500,
            train_size: 0,
            test_size: 1000,
            data_seed: 0,
            noise_std: 0.05,
            scale_min: 0.2,
            scale_max: 0.9,
            eval_gating: EvalGating::Argmax,
            tau_anneal: false,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn dataset(&self, grid: &GridConfig) -> DatasetParams {
        DatasetParams {
            height: grid.image_size.0,
            width: grid.image_size.1,
            num_classes: grid.num_classes,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            noise_std: self.noise_std,
            ..DatasetParams::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_task: f64,
    pub loss_budget: f64,
    pub realized_ratio: f64,
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub acc: f64,
    pub ratio: f64,
    /// Means over the training steps since the previous row.
    pub loss_task: f64,
    pub loss_budget: f64,
}

/// Forward, joint loss and backward for one sample; gradients land in `grads` scaled by `scale`.
fn sample_loss(
    model: &DitModel,
    sample: &Sample,
    grads: &mut GradBuffer,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let cfg = &model.config;
    let c_base = model.costs.baseline(cfg) as f64;
    let mut s = Session::new(&model.store);
    let out = grid_forward(model, &mut s, &sample.image, rng, &ForwardOptions::train())?;
    let task = s.graph.cross_entropy(out.logits, &[sample.label])?;
    let budget = budget_loss(&mut s.graph, out.cost, c_base, cfg.mu)?;
    let total = if cfg.lambda_c == 0.0 {
        task
    } else {
        let weighted = s.graph.scale(budget, cfg.lambda_c)?;
        s.graph.add(task, weighted)?
    };
    let stats = StepStats {
        loss_total: s.graph.value(total).item(),
        loss_task: s.graph.value(task).item(),
        loss_budget: s.graph.value(budget).item(),
        realized_ratio: s.graph.value(out.cost).item() / c_base,
    };
    s.backward_into(total, grads, scale)?;
    Ok(stats)
}

/// One optimizer step on `batch`: per-sample graphs, gradients averaged,
/// AdamW, then the momentum update of every gate.
pub fn train_step(
    model: &mut DitModel,
    opt: &mut AdamW,
    grads: &mut GradBuffer,
    batch: &[Sample],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    grads.zero();
    let scale = 1.0 / batch.len() as f64;
    let mut acc = StepStats {
        loss_total: 0.0,
        loss_task: 0.0,
        loss_budget: 0.0,
        realized_ratio: 0.0,
    };
    for sample in batch {
        let st = sample_loss(model, sample, grads, scale, rng)
            .and_then(|st| {
                if st.loss_total.is_finite() {
                    Ok(st)
                } else {
                    Err(Error::NonFinite { op: "loss" })
                }
            })
            .map_err(|e| diverged(model, opt.step + 1, e))?;
        acc.loss_total += st.loss_total * scale;
        acc.loss_task += st.loss_task * scale;
        acc.loss_budget += st.loss_budget * scale;
        acc.realized_ratio += st.realized_ratio * scale;
    }
    opt.update(&mut model.store, grads, lr);
    model.momentum_update();
    Ok(acc)
}

fn diverged(model: &DitModel, step: u64, e: Error) -> Error {
    if !e.is_numeric() {
        return e;
    }
    Error::Diverged {
        step,
        source: Box::new(e),
        gates: gate_diagnostics(model),
    }
}

/// One line per gate: bias, averaged bias and the largest projection weight.
pub fn gate_diagnostics(model: &DitModel) -> String {
    let mut out = String::new();
    for g in model.gates() {
        let st = &model.store;
        let name = st.get(g.w).name.trim_end_matches(".w");
        out.push_str(&format!(
            "{name}: b={:?} b_hat={:?} max|w|={:.4e} max|w_hat|={:.4e}\n",
            st.value(g.b).data(),
            st.value(g.b_hat).data(),
            st.value(g.w).max_abs(),
            st.value(g.w_hat).max_abs(),
        ));
    }
    out
}

/// Model, optimizer and data stream of one run.
pub struct Trainer {
    pub model: DitModel,
    pub opt: AdamW,
    pub tc: TrainConfig,
    pub seed: u64,
    grads: GradBuffer,
    data: DatasetParams,
}

impl Trainer {
    pub fn new(model: DitModel, tc: TrainConfig, seed: u64) -> Result<Self> {
        let data = tc.dataset(&model.config);
        data.validate()?;
        if tc.batch_size == 0 {
            return Err(Error::Input("batch_size must be ≥ 1".into()));
        }
        let opt = AdamW::new(&model.store, tc.weight_decay);
        let grads = GradBuffer::new(&model.store);
        Ok(Self {
            model,
            opt,
            tc,
            seed,
            grads,
            data,
        })
    }

    /// Resumes from restored weights and optimizer state.
    pub fn resume(model: DitModel, opt: AdamW, tc: TrainConfig, seed: u64) -> Result<Self> {
        let mut t = Self::new(model, tc, seed)?;
        t.opt = opt;
        Ok(t)
    }

    fn batch(&self, step: u64) -> Vec<Sample> {
        let b = self.tc.batch_size as u64;
        (0..b)
            .map(|k| {
                let mut idx = step * b + k;
                if self.tc.train_size > 0 {
                    idx %= self.tc.train_size as u64;
                }
                self.data.sample(self.tc.data_seed, idx)
            })
            .collect()
    }

    /// Runs the next optimizer step. Its batch and Gumbel noise depend only
    /// on the seeds and the step number.
    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.opt.step;
        let batch = self.batch(step);
        let lr = cosine_lr(step as usize + 1, self.tc.steps, self.tc.lr, self.tc.warmup_steps);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(TRAIN_STREAM + step);
        if self.tc.tau_anneal {
            self.model.set_tau(annealed_tau(step as usize, self.tc.steps));
        }
        train_step(&mut self.model, &mut self.opt, &mut self.grads, &batch, lr, &mut rng)
    }

    pub fn test_set(&self) -> Result<SyntheticDataset> {
        self.data.test_set(self.tc.data_seed, self.tc.test_size)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            gating: self.tc.eval_gating,
            seed: self.seed,
            threads: self.tc.threads,
        }
    }

    /// Trains to `tc.steps`, evaluating every `eval_every` steps and at the end.
    pub fn run(&mut self, mut on_eval: impl FnMut(&MetricsRow)) -> Result<Vec<MetricsRow>> {
        let test = self.test_set()?;
        let mut rows = Vec::new();
        let (mut task, mut budget, mut n) = (0.0, 0.0, 0usize);
        while (self.opt.step as usize) < self.tc.steps {
            let st = self.step()?;
            task += st.loss_task;
            budget += st.loss_budget;
            n += 1;
            let done = self.opt.step as usize;
            if done == self.tc.steps || (self.tc.eval_every > 0 && done % self.tc.eval_every == 0) {
                let rep = evaluate(&self.model, &test, &self.eval_options())?;
                let row = MetricsRow {
                    step: done,
                    acc: rep.accuracy,
                    ratio: rep.mean_ratio,
                    loss_task: task / n as f64,
                    loss_budget: budget / n as f64,
                };
                on_eval(&row);
                rows.push(row);
                (task, budget, n) = (0.0, 0.0, 0);
            }
        }
        Ok(rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub gating: EvalGating,
    /// Seeds per-sample streams for sampled and random gates.
    pub seed: u64,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            gating: EvalGating::Argmax,
            seed: 0,
            threads: 1,
        }
    }
}

/// Routing statistics of one node within one scale stratum.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeStats {
    /// Index into [`SCALE_BINS`]; `None` aggregates every sample.
    pub scale_bin: Option<usize>,
    pub level: usize,
    pub column: usize,
    /// Σ (1 − Ḡ_row) over samples where the node was active and has a stage.
    pub skip_sum: f64,
    pub row_count: usize,
    pub open_count: usize,
    pub col_count: usize,
    /// Samples in the stratum.
    pub n_samples: usize,
    /// Samples for which the node was active.
    pub n_active: usize,
}

impl NodeStats {
    pub fn skip_ratio(&self) -> Option<f64> {
        (self.row_count > 0).then(|| self.skip_sum / self.row_count as f64)
    }

    pub fn col_open_freq(&self) -> Option<f64> {
        (self.col_count > 0).then(|| self.open_count as f64 / self.col_count as f64)
    }
}

/// Aggregates traces per node, for every scale bin and overall.
pub fn node_statistics(cfg: &GridConfig, traces: &[RoutingTrace], scales: &[f64]) -> Vec<NodeStats> {
    let bins: Vec<Option<usize>> = (0..SCALE_BINS.len()).map(Some).chain([None]).collect();
    let mut out = Vec::new();
    for bin in bins {
        let members: Vec<&RoutingTrace> = traces
            .iter()
            .zip(scales)
            .filter(|(_, &s)| bin.map_or(true, |b| scale_bin(s) == b))
            .map(|(t, _)| t)
            .collect();
        for i in 0..cfg.levels {
            for j in i..cfg.columns {
                let mut st = NodeStats {
                    scale_bin: bin,
                    level: i,
                    column: j,
                    skip_sum: 0.0,
                    row_count: 0,
                    open_count: 0,
                    col_count: 0,
                    n_samples: members.len(),
                    n_active: 0,
                };
                for t in &members {
                    let Some(nt) = t.node(i, j) else { continue };
                    if !nt.active {
                        continue;
                    }
                    st.n_active += 1;
                    if let Some(r) = &nt.row {
                        st.skip_sum += 1.0 - r.kept() as f64 / r.mask.len() as f64;
                        st.row_count += 1;
                    }
                    if let Some(c) = &nt.col {
                        st.col_count += 1;
                        st.open_count += usize::from(c.open);
                    }
                }
                out.push(st);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Mean of `C_space / C_base` over samples.
    pub mean_ratio: f64,
    /// Mean fraction of tokens executed at evaluated row gates.
    pub mean_keep: f64,
    /// Open rate of column gates that were not forced by the fallback.
    pub col_open_rate: f64,
    pub nodes: Vec<NodeStats>,
    pub traces: Vec<RoutingTrace>,
    pub ratios: Vec<f64>,
    pub predictions: Vec<usize>,
}

struct SampleResult {
    prediction: usize,
    ratio: f64,
    trace: RoutingTrace,
}

/// Stream driving sampled and random gates when evaluating sample `index`.
pub fn eval_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM + index);
    rng
}

fn eval_sample(model: &DitModel, sample: &Sample, opts: &EvalOptions) -> Result<SampleResult> {
    let mut rng = eval_rng(opts.seed, sample.index);
    let mut s = Session::new(&model.store);
    let out = grid_forward(model, &mut s, &sample.image, &mut rng, &ForwardOptions::with_phase(opts.gating.phase()))?;
    let logits = s.graph.value(out.logits).data();
    let prediction = logits
        .iter()
        .enumerate()
        .fold(0, |best, (k, &v)| if v > logits[best] { k } else { best });
    let ledger = CostLedger::from_trace(&model.costs, &model.config, &out.trace);
    Ok(SampleResult {
        prediction,
        ratio: ledger.realized_ratio,
        trace: out.trace,
    })
}

/// Accuracy, realized cost ratio and routing statistics over `data`.
/// Per-sample RNG streams make the result independent of `threads`.
pub fn evaluate(model: &DitModel, data: &SyntheticDataset, opts: &EvalOptions) -> Result<EvalReport> {
    let threads = opts.threads.max(1).min(data.len().max(1));
    let results: Vec<SampleResult> = if threads == 1 {
        data.samples
            .iter()
            .map(|s| eval_sample(model, s, opts))
            .collect::<Result<_>>()?
    } else {
        let chunk = data.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = data
                .samples
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|s| eval_sample(model, s, opts))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(data.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };

    let n = results.len().max(1) as f64;
    let correct = results
        .iter()
        .zip(&data.samples)
        .filter(|(r, s)| r.prediction == s.label)
        .count();
    let (mut keep_sum, mut keep_n, mut open, mut col_n) = (0.0, 0usize, 0usize, 0usize);
    for r in &results {
        for nt in r.trace.nodes.iter().filter(|n| n.active) {
            if let Some(rt) = &nt.row {
                keep_sum += rt.kept() as f64 / rt.mask.len() as f64;
                keep_n += 1;
            }
            if let Some(ct) = nt.col.as_ref().filter(|c| !c.forced) {
                open += usize::from(ct.open);
                col_n += 1;
            }
        }
    }
    let traces: Vec<RoutingTrace> = results.iter().map(|r| r.trace.clone()).collect();
    let scales: Vec<f64> = data.samples.iter().map(|s| s.scale).collect();
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        mean_ratio: results.iter().map(|r| r.ratio).sum::<f64>() / n,
        mean_keep: if keep_n > 0 { keep_sum / keep_n as f64 } else { 0.0 },
        col_open_rate: if col_n > 0 { open as f64 / col_n as f64 } else { 0.0 },
        nodes: node_statistics(&model.config, &traces, &scales),
        ratios: results.iter().map(|r| r.ratio).collect(),
        predictions: results.iter().map(|r| r.prediction).collect(),
        traces,
    })
}

/// FLOPs counted by the graph's matmul instrumentation during one forward,
/// alongside the analytic ledger of the same pass.
pub fn counted_mac_oracle(
    model: &DitModel,
    image: &Tensor,
    opts: &ForwardOptions,
    seed: u64,
) -> Result<(u64, CostLedger)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Session::new(&model.store);
    let out = grid_forward(model, &mut s, image, &mut rng, opts)?;
    let ledger = CostLedger::from_trace(&model.costs, &model.config, &out.trace);
    Ok((s.graph.flops(), ledger))
}
