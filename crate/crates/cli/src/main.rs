//! `mtlinear`: train, benchmark and inspect grouped linear forecasters.
//!
//! Exit codes: 0 on success, 1 when the pipeline fails, 2 for bad
//! configuration or arguments.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtlinear::data::{Split, SplitRule};
use mtlinear::diagnostics::ConflictMode;
use mtlinear::models::Variant;
use mtlinear::optim::OptimizerKind;

use crate::config::{parse_angles, parse_list, Command, RunConfig};

/// A configuration problem; reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Parser)]
#[command(name = "mtlinear", version, about = "Grouped multi-head linear forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model (grid search first with --grid) and save it.
    Train(RunArgs),
    /// Sweep horizons and seeds, grid-searching each, and tabulate results.
    Bench(RunArgs),
    /// Report variate groups for a list of thresholds.
    Groups(RunArgs),
    /// Train with gradient-conflict diagnostics and write the conflict report.
    Conflicts(RunArgs),
    /// Score a saved checkpoint on one split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV file; relative paths are looked up under $MTLINEAR_DATA_DIR.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    date_column: Option<String>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    lookback: Option<usize>,
    /// Comma-separated, e.g. 96,192,336,720.
    #[arg(long)]
    horizons: Option<String>,
    /// Comma-separated angles, e.g. pi/6,pi/4 or 0.5236.
    #[arg(long)]
    alpha_bar: Option<String>,
    /// Comma-separated penalty exponents.
    #[arg(long)]
    a: Option<String>,
    /// Use the full (alpha_bar, a) grid where not given explicitly.
    #[arg(long)]
    grid: bool,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Single seed; shorthand for --seeds N.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record gradient conflicts while training.
    #[arg(long, value_parser = parse_mode)]
    diagnostics: Option<ConflictMode>,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Drop the bias row from every head.
    #[arg(long)]
    no_bias: bool,
    #[arg(long)]
    ma_kernel: Option<usize>,
    /// Train/validation fractions, e.g. 0.7,0.1 (test takes the rest).
    #[arg(long)]
    split_fractions: Option<String>,
    /// Fit on raw values instead of train-split z-scores.
    #[arg(long)]
    raw: bool,
}

fn parse_mode(s: &str) -> Result<ConflictMode, String> {
    s.parse().map_err(|e: mtlinear::Error| e.to_string())
}

fn config_err(e: anyhow::Error) -> anyhow::Error {
    ConfigError(format!("{e:#}")).into()
}

impl RunArgs {
    fn into_config(self, cmd: Command) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_file(path).map_err(config_err)?,
            None => RunConfig::default(),
        };
        if let Some(d) = self.dataset {
            c.dataset = d;
        }
        if let Some(d) = self.date_column {
            c.date_column = d;
        }
        if let Some(v) = self.variant {
            c.train.variant = v;
        }
        if let Some(l) = self.lookback {
            c.lookback = Some(l);
        }
        if let Some(h) = &self.horizons {
            c.horizons = parse_list(h, "horizon").map_err(config_err)?;
        }
        if let Some(a) = &self.alpha_bar {
            c.alpha_bar = parse_angles(a).map_err(config_err)?;
        }
        if let Some(a) = &self.a {
            c.a = parse_list(a, "penalty exponent").map_err(config_err)?;
        }
        if let Some(s) = &self.seeds {
            c.seeds = parse_list(s, "seed").map_err(config_err)?;
        }
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        if self.diagnostics.is_some() {
            c.train.diagnostics = self.diagnostics;
        }
        if let Some(v) = self.lr {
            c.train.lr = v;
        }
        if let Some(v) = self.batch {
            c.train.batch = v;
        }
        if let Some(v) = self.epochs {
            c.train.max_epochs = v;
        }
        if let Some(v) = self.patience {
            c.train.patience = v;
        }
        if let Some(v) = self.optimizer {
            c.train.optimizer = v;
        }
        if self.no_bias {
            c.train.bias = false;
        }
        if let Some(v) = self.ma_kernel {
            c.train.ma_kernel = v;
        }
        if let Some(f) = &self.split_fractions {
            let v: Vec<f64> = parse_list(f, "split fraction").map_err(config_err)?;
            let [train, val] = v[..] else {
                return Err(ConfigError(format!("--split-fractions needs two values, got '{f}'")).into());
            };
            c.split = SplitRule::Fractions { train, val };
        }
        if self.raw {
            c.normalize = false;
        }
        c.resolve(cmd, self.grid).map_err(config_err)
    }
}

fn default_out(cmd: &str, dataset: &Path) -> PathBuf {
    let stem = dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    PathBuf::from("runs").join(format!("{stem}-{cmd}"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (cmd, name, args, extra) = match cli.command {
        Cmd::Train(a) => (Command::Train, "train", a, None),
        Cmd::Bench(a) => (Command::Bench, "bench", a, None),
        Cmd::Groups(a) => (Command::Groups, "groups", a, None),
        Cmd::Conflicts(a) => (Command::Conflicts, "conflicts", a, None),
        Cmd::Evaluate { run, checkpoint, split } => (Command::Evaluate, "evaluate", run, Some((checkpoint, split))),
    };
    let jobs = args.jobs;
    let force = args.force;
    let out = args.out.clone();
    let cfg = args.into_config(cmd)?;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(ConfigError("--jobs must be at least 1".into()).into());
        }
        builder = builder.num_threads(j);
    }
    let pool = builder.build()?;

    if let Some((checkpoint, split)) = extra {
        return pool.install(|| commands::cmd_evaluate(&cfg, &checkpoint, split));
    }
    let out = out.unwrap_or_else(|| default_out(name, &cfg.dataset));
    commands::prepare_out(&out, force)?;
    std::fs::write(out.join("config.resolved"), cfg.to_toml()?)?;
    pool.install(|| match cmd {
        Command::Train => commands::cmd_train(&cfg, &out),
        Command::Bench => commands::cmd_bench(&cfg, &out),
        Command::Groups => commands::cmd_groups(&cfg, &out),
        Command::Conflicts => commands::cmd_conflicts(&cfg, &out),
        Command::Evaluate => unreachable!("handled above"),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<ConfigError>().is_some()
                || matches!(e.downcast_ref::<mtlinear::Error>(), Some(mtlinear::Error::Config(_)));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
