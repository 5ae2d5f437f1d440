//! Command-line driver.
//!
//! Every subcommand reads an optional TOML run configuration; `--seed`,
//! `--threads` and `--out` override it. The resolved configuration is
//! written next to the outputs as `config.resolved.toml`.

mod config;

pub use config::{DataSection, EvalSection, FlowSection, ModeName, OutputSection, RunConfig, Stream, TrainSection};

use crate::data::{self, DataError, Dataset};
use crate::eval::{self, EvalError, GridSpec, OracleError};
use crate::flow::{CheckpointError, Flow, FlowError, FlowMode, FlowParameters, PrecisionSample};
use crate::target::GGMTarget;
use crate::train::{self, TrainError};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CHECKPOINT_T1: &str = "checkpoint_t1.ckpt";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final.ckpt";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// Process exit status.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) | DataError::Csv(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Condition { .. } | FlowError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Divergence { .. } | TrainError::NonFinite { .. } => CliError::Divergence(e.to_string()),
            TrainError::Flow(f) => f.into(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Flow(f) => f.into(),
            EvalError::Train(t) => t.into(),
            EvalError::Io(_) | EvalError::Csv(_) => CliError::Io(e.to_string()),
            EvalError::Grid | EvalError::Level(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "cmflow", version, about = "Conditional matrix flows for sparse Gaussian graphical models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides the configuration).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a sparse precision matrix and a Gaussian dataset from it.
    Generate {
        #[arg(long)]
        d: usize,
        /// Target fraction of zero off-diagonal entries.
        #[arg(long, default_value_t = 0.9)]
        alpha: f64,
        #[arg(long)]
        n: usize,
    },
    /// Train a flow; writes the T=1 and final checkpoints and the loss trace.
    Train,
    /// Draw posterior samples and credible intervals at one condition.
    Sample {
        #[command(flatten)]
        at: ConditionArgs,
        /// Number of samples (defaults to eval.samples).
        #[arg(long)]
        n: Option<usize>,
    },
    /// MAP solution path over the λ grid from the final checkpoint.
    Path {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        q: Option<f64>,
    },
    /// Evidence curve over the λ grid and its maximizer.
    Select {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        q: Option<f64>,
    },
    /// Edge recovery against a ground-truth file.
    Eval {
        #[command(flatten)]
        at: ConditionArgs,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Compare flow credible intervals with the grid oracle (d <= 2).
    OracleCheck {
        #[command(flatten)]
        at: ConditionArgs,
    },
}

#[derive(Debug, Args)]
pub struct ConditionArgs {
    /// Checkpoint path (defaults to the T=1 checkpoint in the output dir).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    /// Credible level.
    #[arg(long)]
    pub level: Option<f64>,
}

/// Parses arguments, runs the command and returns the exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("CMFLOW_LOG", "info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.global.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(CliError::Config)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.global.out {
        cfg.output.dir = o.clone();
    }
    if let Some(t) = cli.global.threads {
        crate::parallel::set_threads(t);
    }
    fs::create_dir_all(&cfg.output.dir)?;
    fs::write(cfg.output.dir.join(RESOLVED_CONFIG), cfg.to_toml())?;

    match cli.command {
        Command::Generate { d, alpha, n } => cmd_generate(&cfg, d, alpha, n),
        Command::Train => cmd_train(&cfg).map(|_| ()),
        Command::Sample { at, n } => cmd_sample(&cfg, &at, n),
        Command::Path { checkpoint, q } => cmd_path(&cfg, checkpoint, q),
        Command::Select { checkpoint, q } => cmd_select(&cfg, checkpoint, q),
        Command::Eval { at, truth } => cmd_eval(&cfg, &at, truth),
        Command::OracleCheck { at } => cmd_oracle_check(&cfg, &at),
    }
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output.dir.join(name)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    let f = fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

pub fn cmd_generate(cfg: &RunConfig, d: usize, alpha: f64, n: usize) -> Result<(), CliError> {
    if d == 0 || n == 0 || !(0.0..=1.0).contains(&alpha) {
        return Err(CliError::Config("need d >= 1, n >= 1 and alpha in [0, 1]".into()));
    }
    let seed = cfg.stream(Stream::Data);
    let gt = data::generate_sparse_precision(d, alpha, seed);
    let ds = data::sample_gaussian(&gt, n, train::stream_seed(seed, 1, 1));
    let (data_path, truth_path) = (out_path(cfg, "data.csv"), out_path(cfg, "truth.csv"));
    ds.write_csv(&data_path)?;
    data::write_ground_truth(&gt, &truth_path)?;
    info!(
        "wrote {} ({}×{}) and {} ({} edges, zero fraction {:.3})",
        data_path.display(),
        n,
        d,
        truth_path.display(),
        gt.edges.len(),
        gt.zero_fraction()
    );
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = cfg
        .data
        .input
        .as_ref()
        .ok_or_else(|| CliError::Config("data.input is not set".into()))?;
    let queries = (cfg.flow.mode == ModeName::Block).then_some(cfg.data.queries.as_slice());
    Ok(data::load_csv(path, queries)?)
}

fn load_target(cfg: &RunConfig) -> Result<GGMTarget, CliError> {
    load_dataset(cfg)?.target().map_err(|e| CliError::Config(e.to_string()))
}

/// Paths of the checkpoints written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub bayes: Option<PathBuf>,
    pub map: PathBuf,
    pub trace: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts, CliError> {
    let ds = load_dataset(cfg)?;
    let target = ds.target().map_err(|e| CliError::Config(e.to_string()))?;
    let flow_cfg = cfg.flow_config(ds.d()).map_err(CliError::Config)?;
    let train_cfg = cfg.train_config().map_err(CliError::Config)?;
    let params = FlowParameters::init(flow_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.stream(Stream::Init)));
    info!(
        "training {:?} flow with {} parameters for {} epochs",
        params.config.mode,
        params.values.len(),
        train_cfg.schedule.epochs_total
    );
    let out = train::train(params, &target, &train_cfg)?;

    let bayes = match &out.bayes {
        Some(s) => {
            let p = out_path(cfg, CHECKPOINT_T1);
            s.params.save(&p, s.temperature, s.epoch as u64)?;
            Some(p)
        }
        None => {
            log::warn!("schedule never reaches T <= 1; no T=1 checkpoint written");
            None
        }
    };
    let map = out_path(cfg, CHECKPOINT_FINAL);
    out.map.params.save(&map, out.map.temperature, out.map.epoch as u64)?;
    let trace = out_path(cfg, "trace.csv");
    train::write_trace(&out.trace, create(&trace)?).map_err(|e| CliError::Io(e.to_string()))?;
    if out.skipped_steps > 0 {
        log::warn!("{} optimizer steps skipped for non-finite gradients", out.skipped_steps);
    }
    Ok(TrainArtifacts { bayes, map, trace })
}

fn load_flow(cfg: &RunConfig, path: Option<PathBuf>, default: &str) -> Result<(Flow, f64), CliError> {
    let path = path.unwrap_or_else(|| out_path(cfg, default));
    let (params, temperature, _) = FlowParameters::load(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok((Flow::new(params)?, temperature))
}

fn write_samples_jsonl<W: Write>(samples: &[PrecisionSample], cond: (f64, f64, f64), mut w: W) -> Result<(), CliError> {
    let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().cloned().collect()).collect() };
    for s in samples {
        let line = serde_json::json!({
            "lambda": cond.0,
            "q": cond.1,
            "temperature": cond.2,
            "omega": rows(&s.omega),
            "cross": s.cross.as_ref().map(rows),
            "log_q": s.log_q,
        });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn resolve(cfg: &RunConfig, at: &ConditionArgs) -> (f64, f64, f64) {
    (
        at.lambda.unwrap_or(cfg.eval.lambda),
        at.q.unwrap_or(cfg.eval.q),
        at.level.unwrap_or(cfg.eval.level),
    )
}

pub fn cmd_sample(cfg: &RunConfig, at: &ConditionArgs, n: Option<usize>) -> Result<(), CliError> {
    let (flow, temperature) = load_flow(cfg, at.checkpoint.clone(), CHECKPOINT_T1)?;
    let (lambda, q, level) = resolve(cfg, at);
    let n = n.unwrap_or(cfg.eval.samples);
    let samples = eval::posterior_samples(&flow, lambda, q, n, cfg.stream(Stream::Sample))?;
    let cond = (lambda, q, temperature);
    write_samples_jsonl(&samples, cond, create(&out_path(cfg, "samples.jsonl"))?)?;
    if n >= 2 {
        let summary = eval::credible_intervals(&samples, level, cond)?;
        summary.write_csv(create(&out_path(cfg, "intervals.csv"))?)?;
        let edges = eval::edge_set(&summary);
        eval::write_edges(&edges, create(&out_path(cfg, "edges.csv"))?)?;
        info!("{n} samples at λ={lambda}, q={q}; {} edges at level {level}", edges.len());
    }
    Ok(())
}

pub fn cmd_path(cfg: &RunConfig, checkpoint: Option<PathBuf>, q: Option<f64>) -> Result<(), CliError> {
    let (flow, temperature) = load_flow(cfg, checkpoint, CHECKPOINT_FINAL)?;
    let q = q.unwrap_or(cfg.eval.q);
    let grid = cfg.lambda_grid();
    let path = eval::solution_path(&flow, temperature, &grid, q, cfg.eval.n_map, cfg.stream(Stream::Sample))?;
    path.write_csv(create(&out_path(cfg, "path.csv"))?)?;
    if q == 1.0 && matches!(flow.config().mode, FlowMode::Full { .. }) && cfg.data.input.is_some() {
        let target = load_target(cfg)?;
        println!("# reference path: S~ = (S + lambda I)/n, rho = 2 lambda / n");
        let reference = eval::map_reference_path(&target.scatter, target.n, &grid)?;
        reference.write_csv(create(&out_path(cfg, "reference_path.csv"))?)?;
        println!("path_mse = {:.6}", eval::path_mse(&path, &reference)?);
    }
    Ok(())
}

pub fn cmd_select(cfg: &RunConfig, checkpoint: Option<PathBuf>, q: Option<f64>) -> Result<(), CliError> {
    let (flow, _) = load_flow(cfg, checkpoint, CHECKPOINT_T1)?;
    let target = load_target(cfg)?;
    let q = q.unwrap_or(cfg.eval.q);
    let sel = eval::select_lambda(
        &flow,
        &target,
        &cfg.lambda_grid(),
        q,
        cfg.eval.evidence_samples,
        cfg.stream(Stream::Sample),
    )?;
    sel.write_csv(create(&out_path(cfg, "evidence.csv"))?)?;
    println!("lambda_star = {}", sel.best);
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, at: &ConditionArgs, truth: Option<PathBuf>) -> Result<(), CliError> {
    let truth = truth
        .or_else(|| cfg.data.truth.clone())
        .ok_or_else(|| CliError::Config("no ground-truth file given".into()))?;
    let gt = data::read_ground_truth(&truth)?;
    let (flow, temperature) = load_flow(cfg, at.checkpoint.clone(), CHECKPOINT_T1)?;
    let (lambda, q, level) = resolve(cfg, at);
    let samples = eval::posterior_samples(&flow, lambda, q, cfg.eval.samples, cfg.stream(Stream::Sample))?;
    let summary = eval::credible_intervals(&samples, level, (lambda, q, temperature))?;
    let edges = eval::edge_set(&summary);
    eval::write_edges(&edges, create(&out_path(cfg, "edges.csv"))?)?;
    let predicted = eval::edge_pairs(&edges);
    let f1 = eval::f1_score(&predicted, &gt.edges);
    let report = serde_json::json!({
        "lambda": lambda,
        "q": q,
        "level": level,
        "samples": cfg.eval.samples,
        "predicted_edges": predicted.len(),
        "true_edges": gt.edges.len(),
        "f1": f1,
    });
    fs::write(out_path(cfg, "eval.json"), format!("{report:#}\n"))?;
    println!("f1 = {f1:.4}");
    Ok(())
}

pub fn cmd_oracle_check(cfg: &RunConfig, at: &ConditionArgs) -> Result<(), CliError> {
    let (flow, temperature) = load_flow(cfg, at.checkpoint.clone(), CHECKPOINT_T1)?;
    let target = load_target(cfg)?;
    if !matches!(flow.config().mode, FlowMode::Full { d } if d <= 2) {
        return Err(CliError::Config("oracle check needs a full-mode flow with d <= 2".into()));
    }
    let (lambda, q, level) = resolve(cfg, at);
    let samples = eval::posterior_samples(&flow, lambda, q, cfg.eval.samples, cfg.stream(Stream::Sample))?;
    let summary = eval::credible_intervals(&samples, level, (lambda, q, temperature))?;
    let table = oracle_table(&target, lambda, q, cfg.eval.oracle_points)?;

    let mut w = csv::Writer::from_writer(create(&out_path(cfg, "oracle_check.csv"))?);
    w.write_record(["i", "j", "flow_lower", "oracle_lower", "rel_lower", "flow_upper", "oracle_upper", "rel_upper"])
        .map_err(|e| CliError::Io(e.to_string()))?;
    for (e, &(i, j)) in summary.entries.iter().enumerate() {
        let (lo, hi) = table.interval(e, level);
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
        let (rl, ru) = (rel(summary.lower[e], lo), rel(summary.upper[e], hi));
        println!("({i},{j}) lower {:.4} vs {lo:.4} ({rl:.2e}), upper {:.4} vs {hi:.4} ({ru:.2e})", summary.lower[e], summary.upper[e]);
        w.write_record([
            i.to_string(),
            j.to_string(),
            summary.lower[e].to_string(),
            lo.to_string(),
            rl.to_string(),
            summary.upper[e].to_string(),
            hi.to_string(),
            ru.to_string(),
        ])
        .map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Grid oracle with one refinement pass around the coarse table's tails.
pub fn oracle_table(target: &GGMTarget, lambda: f64, q: f64, points: usize) -> Result<eval::OracleTable, OracleError> {
    let coarse = eval::grid_oracle_posterior(target, lambda, q, &GridSpec::auto(target, lambda, points)?)?;
    eval::grid_oracle_posterior(target, lambda, q, &coarse.refined(points))
}
