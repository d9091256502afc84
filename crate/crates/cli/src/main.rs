use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use optgym::agent::{ActionSpaceKind, AgentError};
use optgym::interp::InterpError;
use optgym::transform::TransformError;
use optgym::{EnvError, OpKind, RewardMode};
use thiserror::Error;

mod commands;
mod config;

use config::{BackendKind, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad input: {0}")]
    Input(String),
    #[error("writing output: {0}")]
    Output(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Interp(#[from] InterpError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "opt-gym", version, about = "Loop-nest optimization gym: datasets, PPO training, evaluation and search")]
struct Cli {
    /// JSON run configuration; unspecified fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cost source for rewards and reported costs.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train/validation datasets as JSON lines.
    Generate(GenerateArgs),
    /// Train a policy with PPO.
    Train(TrainArgs),
    /// Compare a trained policy with exhaustive search.
    Evaluate(EvaluateArgs),
    /// Search the best schedule for one operation.
    Autoschedule(AutoscheduleArgs),
    /// Apply a schedule to one operation.
    Apply(ApplyArgs),
}

type Counts = BTreeMap<OpKind, usize>;

/// `matmul=10,conv2d=4`; kinds left out get 0.
fn parse_counts(s: &str) -> Result<Counts, String> {
    let mut out: Counts = OpKind::ALL.iter().map(|&k| (k, 0)).collect();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, n) = part
            .split_once('=')
            .ok_or_else(|| format!("expected kind=count, got `{part}`"))?;
        let kind: OpKind = k.trim().parse()?;
        let n = n.trim().parse().map_err(|e| format!("count for {kind}: {e}"))?;
        out.insert(kind, n);
    }
    Ok(out)
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Per-kind op counts for both splits, unless `--val-counts` is given.
    #[arg(long, value_parser = parse_counts)]
    counts: Option<Counts>,
    /// Per-kind op counts for the validation split.
    #[arg(long, value_parser = parse_counts)]
    val_counts: Option<Counts>,
    /// Output directory (default: the configured data directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RewardArg {
    Immediate,
    Final,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SpaceArg {
    Hier,
    Simple,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training set (default: `train.jsonl` in the data directory).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    reward: Option<RewardArg>,
    #[arg(long, value_enum)]
    space: Option<SpaceArg>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Run directory (default: the configured one).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a numbered checkpoint every this many iterations; 0 disables.
    #[arg(long, default_value_t = 100)]
    checkpoint_every: usize,
    /// Print progress every this many iterations; 0 disables.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Policy checkpoint (default: `policy.ckpt` in the run directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ops to evaluate (default: `validation.jsonl` in the data directory).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sampled episodes and baseline evaluations per cumulative-best curve.
    #[arg(long, default_value_t = 50)]
    curve_len: usize,
}

#[derive(Debug, Args)]
struct OpInput {
    /// Op as a JSON object or a JSON-lines file.
    #[arg(long)]
    op: PathBuf,
    /// Line to take from a JSON-lines op file.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Debug, Args)]
struct AutoscheduleArgs {
    #[command(flatten)]
    input: OpInput,
    /// Stop after this many evaluated schedules.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    max_tile: Option<u64>,
    /// Fewest loops a tiling or parallelization must tile.
    #[arg(long)]
    min_tiled: Option<usize>,
    /// Write the best schedule here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the search trace here as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ApplyArgs {
    #[command(flatten)]
    input: OpInput,
    /// Schedule JSON, as written by `autoschedule --out`.
    #[arg(long)]
    schedule: PathBuf,
    /// Check the result against the untransformed op with the interpreter.
    #[arg(long)]
    verify: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn set_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("OPT_GYM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("OPT_GYM_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    set_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = cli.backend {
        cfg.backend = b;
    }
    match cli.command {
        Command::Generate(a) => {
            if let Some(c) = &a.counts {
                cfg.dataset.train_counts = c.clone();
                cfg.dataset.validation_counts = c.clone();
            }
            if let Some(c) = a.val_counts {
                cfg.dataset.validation_counts = c;
            }
            commands::generate(&cfg, a.out.as_deref())
        }
        Command::Train(a) => {
            if let Some(r) = a.reward {
                cfg.reward_mode = match r {
                    RewardArg::Immediate => RewardMode::Immediate,
                    RewardArg::Final => RewardMode::Final,
                };
            }
            if let Some(s) = a.space {
                cfg.action_space = match s {
                    SpaceArg::Hier => ActionSpaceKind::Hierarchical,
                    SpaceArg::Simple => ActionSpaceKind::Simple,
                };
            }
            if let Some(n) = a.iterations {
                cfg.ppo.iterations = n;
            }
            if let Some(o) = a.out {
                cfg.paths.run_dir = o;
            }
            commands::train(&cfg, a.data.as_deref(), a.checkpoint_every, a.log_every)
        }
        Command::Evaluate(a) => {
            if let Some(o) = a.out {
                cfg.paths.report_dir = o;
            }
            commands::evaluate(&cfg, a.checkpoint.as_deref(), a.data.as_deref(), a.curve_len)
        }
        Command::Autoschedule(a) => {
            if a.budget.is_some() {
                cfg.search.budget = a.budget;
            }
            if let Some(t) = a.max_tile {
                cfg.search.max_tile = t;
            }
            if let Some(m) = a.min_tiled {
                cfg.search.min_tiled_loops = m;
            }
            let op = commands::read_op(&a.input.op, a.input.index)?;
            commands::autoschedule(&cfg, &op, a.out.as_deref(), a.trace.as_deref())
        }
        Command::Apply(a) => {
            let op = commands::read_op(&a.input.op, a.input.index)?;
            commands::apply(&cfg, &op, &a.schedule, a.verify, a.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_parsing() {
        let c = parse_counts("matmul=3, conv=2").unwrap();
        assert_eq!(c[&OpKind::Matmul], 3);
        assert_eq!(c[&OpKind::Conv2D], 2);
        assert_eq!(c[&OpKind::Relu], 0);
        assert!(parse_counts("matmul").is_err());
        assert!(parse_counts("gemm=1").is_err());
        assert!(parse_counts("add=-1").is_err());
    }

    #[test]
    fn cli_shape() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
