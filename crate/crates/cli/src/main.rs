use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dit_core::checkpoint::Checkpoint;
use dit_core::config::RunConfig;
use dit_core::gates::{GateMode, Phase};
use dit_core::grid::{grid_forward, DitModel, ForwardOptions, RoutingMode};
use dit_core::report;
use dit_core::train::{counted_mac_oracle, eval_rng, evaluate, EvalGating, EvalOptions, Trainer};
use dit_core::{Error, Tensor};

#[derive(Parser)]
#[command(name = "dit", version, about = "Train and inspect dynamic token-routing grid transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_routing)]
    routing_mode: Option<RoutingMode>,
    #[arg(long, value_parser = parse_gate)]
    gate_mode: Option<GateMode>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long = "lambda-c")]
    lambda_c: Option<f64>,
}

fn parse_routing(s: &str) -> Result<RoutingMode, String> {
    s.parse()
}

fn parse_gate(s: &str) -> Result<GateMode, String> {
    s.parse()
}

#[derive(Clone, Copy, ValueEnum)]
enum Gating {
    Argmax,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum Force {
    Open,
    Closed,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch; writes the resolved config, metrics.csv and checkpoint.ditc.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write per-node routing masks of test images as PGM files.
    VizMasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of test images.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Override every row gate.
        #[arg(long, value_enum)]
        force_row: Option<Force>,
    },
    /// Scale-stratified skip ratios and column-gate open frequencies.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "argmax")]
        gating: Gating,
    },
    /// Analytic cost of the baseline and the fully-open grid.
    FlopsReport {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.routing_mode {
            cfg.grid.routing_mode = m;
        }
        if let Some(m) = self.gate_mode {
            cfg.grid.gate_mode = m;
        }
        if let Some(mu) = self.mu {
            cfg.grid.mu = mu;
        }
        if let Some(l) = self.lambda_c {
            cfg.grid.lambda_c = l;
        }
    }

    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> anyhow::Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn given(&self) -> bool {
        self.config.is_some()
            || self.seed.is_some()
            || self.routing_mode.is_some()
            || self.gate_mode.is_some()
            || self.mu.is_some()
            || self.lambda_c.is_some()
    }
}

/// Loads a checkpoint; any config given on the command line must match it.
fn load(common: &Common, path: &Path) -> anyhow::Result<(RunConfig, DitModel)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (stored, model, _) = ck.restore()?;
    if common.given() {
        let mut wanted = match &common.config {
            Some(_) => common.resolve()?,
            None => stored.clone(),
        };
        common.apply(&mut wanted);
        ck.check_config(&wanted)?;
    }
    Ok((stored, model))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn train(common: &Common) -> anyhow::Result<()> {
    let cfg = common.resolve()?;
    let out = common.out_dir()?;
    write(&out.join("config.txt"), cfg.to_text())?;
    let model = DitModel::new(cfg.grid.clone(), cfg.seed)?;
    println!(
        "parameters: {} total, {} gate averages excluded",
        model.store.iter().map(|(_, p)| p.value.numel()).sum::<usize>(),
        model.parameter_count()
    );
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.seed)?;
    let started = Instant::now();
    println!("{}", report::METRICS_HEADER);
    let rows = trainer.run(|r| println!("{}", report::metrics_line(r)))?;
    write(&out.join("metrics.csv"), report::metrics_csv(&rows))?;
    Checkpoint::capture(&cfg, &trainer.model, &trainer.opt).save(&out.join("checkpoint.ditc"))?;
    eprintln!("trained {} steps in {:.1}s", cfg.train.steps, started.elapsed().as_secs_f64());
    Ok(())
}

fn eval_options(cfg: &RunConfig, gating: EvalGating) -> EvalOptions {
    EvalOptions {
        gating,
        seed: cfg.seed,
        threads: cfg.train.threads,
    }
}

fn eval(common: &Common, checkpoint: &Path) -> anyhow::Result<()> {
    let (cfg, model) = load(common, checkpoint)?;
    let test = cfg.train.dataset(&cfg.grid).test_set(cfg.train.data_seed, cfg.train.test_size)?;
    let rep = evaluate(&model, &test, &eval_options(&cfg, cfg.train.eval_gating))?;
    let line = format!(
        "acc={} ratio={} keep={} col_open={} n={}",
        rep.accuracy,
        rep.mean_ratio,
        rep.mean_keep,
        rep.col_open_rate,
        test.len()
    );
    println!("{line}");
    if common.out.is_some() {
        write(&common.out_dir()?.join("eval.txt"), format!("{line}\n"))?;
    }
    Ok(())
}

fn viz_masks(common: &Common, checkpoint: &Path, count: usize, force: Option<Force>) -> anyhow::Result<()> {
    let (cfg, model) = load(common, checkpoint)?;
    let out = common.out_dir()?;
    let test = cfg.train.dataset(&cfg.grid).test_set(cfg.train.data_seed, count)?;
    let mut opts = ForwardOptions::infer();
    opts.force_row = force.map(|f| matches!(f, Force::Open));
    let mut manifest = String::new();
    let mut written = 0;
    for (k, sample) in test.samples.iter().enumerate() {
        let mut rng = eval_rng(cfg.seed, sample.index);
        let mut s = model.session();
        let fwd = grid_forward(&model, &mut s, &sample.image, &mut rng, &opts)?;
        let (files, m) = report::write_masks(&out, k, &cfg.grid, &fwd.trace)?;
        written += files.len();
        manifest.push_str(&m);
    }
    write(&out.join("manifest.txt"), manifest)?;
    println!("wrote {written} masks to {}", out.display());
    Ok(())
}

fn stats(common: &Common, checkpoint: &Path, gating: Gating) -> anyhow::Result<()> {
    let (cfg, model) = load(common, checkpoint)?;
    let test = cfg.train.dataset(&cfg.grid).test_set(cfg.train.data_seed, cfg.train.test_size)?;
    let gating = match gating {
        Gating::Argmax => EvalGating::Argmax,
        Gating::Sample => EvalGating::Sample,
    };
    let rep = evaluate(&model, &test, &eval_options(&cfg, gating))?;
    let csv = report::stats_csv(&rep.nodes);
    if common.out.is_some() {
        write(&common.out_dir()?.join("stats.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn flops_report(common: &Common) -> anyhow::Result<()> {
    let mut cfg = common.resolve()?;
    cfg.grid.routing_mode = RoutingMode::Fully;
    let model = DitModel::new(cfg.grid.clone(), cfg.seed)?;
    let (h, w) = cfg.grid.image_size;
    let image = Tensor::zeros(&[h, w, cfg.grid.channels]);
    let (counted, ledger) = counted_mac_oracle(&model, &image, &ForwardOptions::with_phase(Phase::Infer), cfg.seed)?;
    let fully = model.costs.fully_open(&cfg.grid) as f64;
    if (fully - ledger.c_space).abs() > 0.0 || counted as f64 != ledger.c_space {
        bail!("analytic total {fully} disagrees with the traced forward ({} / counted {counted})", ledger.c_space);
    }
    let table = report::flops_table(&cfg.grid, &ledger, fully);
    print!("{table}");
    println!("counted FLOPs on the fully-open forward = {counted}");
    if common.out.is_some() {
        let out = common.out_dir()?;
        write(&out.join("flops.csv"), report::flops_csv(&ledger))?;
        write(&out.join("flops.txt"), &table)?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common } => train(&common),
        Command::Eval { common, checkpoint } => eval(&common, &checkpoint),
        Command::VizMasks {
            common,
            checkpoint,
            count,
            force_row,
        } => viz_masks(&common, &checkpoint, count, force_row),
        Command::Stats {
            common,
            checkpoint,
            gating,
        } => stats(&common, &checkpoint, gating),
        Command::FlopsReport { common } => flops_report(&common),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::ConfigMismatch { .. }) => 2,
        Some(e) if e.is_numeric() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
