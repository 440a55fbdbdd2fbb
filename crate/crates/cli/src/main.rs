//! `proxvi` command-line driver.

mod check;
mod ctm_io;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use proxvi::baselines::OptimizerKind;
use proxvi::estimators::GradientMode;
use proxvi::harness::{
    cache_dir, fetch_dataset, prepare, run_prepared, stepsize_sweep, DataFormat, ExperimentConfig, LabelSpec, MethodId,
    Summary,
};
use proxvi::solver::RunStatus;

/// Exit status for a run that exhausted its pass budget.
const EXIT_BUDGET: u8 = 4;
/// Exit status for a run that diverged.
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "proxvi", version, about = "Proximal-gradient stochastic variational inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one method on one dataset.
    Fit(FitArgs),
    /// Run a method over a grid of step sizes.
    Sweep(SweepArgs),
    /// Run every method on a dataset and tabulate the outcomes.
    Bench(BenchArgs),
    /// Fit a correlated topic model.
    CtmFit(ctm_io::CtmFitArgs),
    /// Held-out log-likelihood of a fitted topic model.
    CtmEval(ctm_io::CtmEvalArgs),
    /// Download (or copy from the bundle) a registry dataset into the cache.
    FetchData {
        #[arg(long)]
        dataset: String,
        /// Cache directory; defaults to `$PROXVI_CACHE` or `~/.cache/proxvi`.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Check,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Registry name (ionosphere, sonar, usps) or a data file path.
    #[arg(long, default_value = "ionosphere")]
    dataset: String,
    /// File format for a path dataset: csv or svmlight.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Class token mapped to +1 for a path dataset; labels are numeric otherwise.
    #[arg(long)]
    positive: Option<String>,
    /// Training rows for a path dataset.
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    log_length_scale: Option<f64>,
    #[arg(long)]
    log_signal_std: Option<f64>,
    /// Step size `β` per iteration (`α₀` for baselines without a preset).
    #[arg(long, conflicts_with = "beta_times_n")]
    beta: Option<f64>,
    /// Step size given as `β · N_train`.
    #[arg(long)]
    beta_times_n: Option<f64>,
    #[arg(long)]
    minibatch: Option<usize>,
    /// Monte Carlo samples per example; implies `--mc`.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Relative ELBO change per pass declared as convergence.
    #[arg(long)]
    threshold: Option<f64>,
    /// Baseline hyperparameter preset, `kind/dataset` (e.g. `adam/ionosphere`).
    #[arg(long)]
    preset: Option<String>,
    /// Score-function Monte Carlo gradients.
    #[arg(long, conflicts_with = "quadrature")]
    mc: bool,
    /// Gauss–Hermite quadrature gradients.
    #[arg(long)]
    quadrature: bool,
    /// Skip test log-loss evaluation.
    #[arg(long)]
    no_test_logloss: bool,
    /// Record wall-clock time in traces (makes them non-reproducible).
    #[arg(long)]
    timing: bool,
    /// Output directory for trace.csv, summary.csv and config.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// pg, pg-mc, pg-svi, pg-oracle, gd, sgd, adagrad, rmsprop, adadelta, adam.
    #[arg(long, default_value = "pg-svi")]
    method: String,
    /// Replay a config.txt snapshot; other flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "pg")]
    method: String,
    /// Comma-separated ascending step sizes; defaults to 10^(i/2), i = -16..=8.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated methods; defaults to all.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[command(flatten)]
    run: RunArgs,
}

fn parse_method(name: &str) -> Result<MethodId> {
    MethodId::from_name(name).with_context(|| format!("unknown method '{name}'"))
}

fn build_config(method: MethodId, a: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match ExperimentConfig::for_dataset(&a.dataset, method) {
        Ok(c) => c,
        Err(_) if Path::new(&a.dataset).exists() => {
            let mut c = ExperimentConfig::for_dataset("ionosphere", method)?;
            c.dataset = a.dataset.clone();
            c.format = DataFormat::from_name(&a.format).with_context(|| format!("unknown format '{}'", a.format))?;
            c.labels = a.positive.clone().map_or(LabelSpec::Numeric, LabelSpec::Positive);
            c.train = a.train.context("--train is required for a dataset path")?;
            c.preset = None;
            c.beta = 1.0 / c.train as f64;
            if !method.is_full_batch() {
                c.minibatch = c.minibatch.min(c.train);
            } else {
                c.minibatch = c.train;
            }
            c
        }
        Err(e) => return Err(e).with_context(|| format!("'{}' is neither a registry dataset nor a file", a.dataset)),
    };
    if let Some(t) = a.train {
        cfg.train = t;
    }
    if let Some(v) = a.log_length_scale {
        cfg.log_length_scale = v;
    }
    if let Some(v) = a.log_signal_std {
        cfg.log_signal_std = v;
    }
    if let Some(b) = a.beta {
        cfg.beta = b;
    }
    if let Some(b) = a.beta_times_n {
        cfg.beta = b / cfg.train as f64;
    }
    if (a.beta.is_some() || a.beta_times_n.is_some()) && a.preset.is_none() {
        cfg.preset = None;
    }
    if let Some(p) = &a.preset {
        cfg.preset = Some(p.clone());
    }
    if let Some(m) = a.minibatch {
        cfg.minibatch = m;
    }
    if a.quadrature {
        cfg.gradient = GradientMode::Quadrature;
    }
    if a.mc || a.samples.is_some() {
        let samples = a.samples.unwrap_or(match cfg.gradient {
            GradientMode::MonteCarlo { samples } => samples,
            GradientMode::Quadrature => 500,
        });
        cfg.gradient = GradientMode::MonteCarlo { samples };
    }
    if let Some(p) = a.passes {
        cfg.passes = p;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    cfg.test_logloss = !a.no_test_logloss;
    cfg.record_timing = a.timing;
    cfg.out = a.out.clone();
    cfg.validate()?;
    Ok(cfg)
}

fn status_code(status: RunStatus) -> ExitCode {
    match status {
        RunStatus::Converged => ExitCode::SUCCESS,
        RunStatus::BudgetExhausted => ExitCode::from(EXIT_BUDGET),
        RunStatus::Diverged => ExitCode::from(EXIT_DIVERGED),
    }
}

fn print_summary(s: &Summary) {
    println!(
        "{:<10} {:<11} {:<16} passes={:<4} converged_at={:<5} elbo={:<14.6} test_logloss={}",
        s.method,
        s.dataset,
        format!("{:?}", s.status),
        s.passes_run,
        s.passes_to_converge.map_or("-".into(), |p| p.to_string()),
        s.final_elbo,
        s.final_test_logloss.map_or("-".into(), |v| format!("{v:.4}")),
    );
}

fn fit(args: FitArgs) -> Result<ExitCode> {
    let cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_snapshot(&text)?
        }
        None => build_config(parse_method(&args.method)?, &args.run)?,
    };
    let data = prepare(&cfg)?;
    let outcome = run_prepared(&data, &cfg)?;
    print_summary(&outcome.summary);
    if let Some(dir) = &outcome.dir {
        info!("artifacts in {}", dir.display());
    }
    Ok(status_code(outcome.summary.status))
}

fn default_grid() -> Vec<f64> {
    (-16..=8).map(|i| 10f64.powf(f64::from(i) * 0.5)).collect()
}

fn sweep(args: SweepArgs) -> Result<ExitCode> {
    let cfg = build_config(parse_method(&args.method)?, &args.run)?;
    let grid = if args.grid.is_empty() { default_grid() } else { args.grid };
    let rows = stepsize_sweep(&cfg, &grid)?;
    println!("{:>12} {:>18} {:>9} {:>16}", "beta", "passes_to_converge", "diverged", "final_elbo");
    for r in &rows {
        println!(
            "{:>12.4e} {:>18} {:>9} {:>16.6}",
            r.beta,
            r.passes_to_converge.map_or("-".into(), |p| p.to_string()),
            r.diverged,
            r.final_elbo
        );
    }
    match proxvi::harness::max_stable_step(&rows) {
        Some(b) => println!("largest non-diverging step: {b:.4e}"),
        None => println!("every step diverged"),
    }
    Ok(ExitCode::SUCCESS)
}

fn bench(args: BenchArgs) -> Result<ExitCode> {
    let methods = if args.methods.is_empty() {
        MethodId::ALL.to_vec()
    } else {
        args.methods.iter().map(|m| parse_method(m)).collect::<Result<_>>()?
    };
    let mut run = args.run.clone();
    run.passes = run.passes.or(Some(10));
    let base = build_config(methods[0], &run)?;
    let data = prepare(&base)?;
    let mut table = String::from("method,status,passes_run,passes_to_converge,final_elbo,final_test_logloss\n");
    for m in methods {
        let mut r = run.clone();
        r.out = run.out.as_ref().map(|d| d.join(m.name()));
        // Per-method defaults (presets, gradient mode) unless overridden.
        if matches!(m, MethodId::Baseline(k) if k != OptimizerKind::Gd) {
            r.beta = None;
            r.beta_times_n = None;
        }
        let cfg = build_config(m, &r)?;
        let outcome = run_prepared(&data, &cfg)?;
        let s = &outcome.summary;
        print_summary(s);
        table.push_str(&format!(
            "{},{:?},{},{},{},{}\n",
            s.method,
            s.status,
            s.passes_run,
            s.passes_to_converge.map_or(String::new(), |p| p.to_string()),
            s.final_elbo,
            s.final_test_logloss.map_or(String::new(), |v| v.to_string())
        ));
    }
    if let Some(dir) = &run.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bench.csv"), table)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => fit(a),
        Command::Sweep(a) => sweep(a),
        Command::Bench(a) => bench(a),
        Command::CtmFit(a) => ctm_io::fit(a),
        Command::CtmEval(a) => ctm_io::eval(a),
        Command::FetchData { dataset, cache } => {
            let cache = cache.unwrap_or_else(cache_dir);
            fetch_dataset(&dataset, &cache).map(|p| {
                println!("{}", p.display());
                ExitCode::SUCCESS
            }).map_err(Into::into)
        }
        Command::Check => check::run(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
