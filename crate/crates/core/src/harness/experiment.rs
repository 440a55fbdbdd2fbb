//! Experiment runs, trace persistence and step-size sweeps.
//!
//! A run writes three files into its output directory:
//!
//! * `trace.csv`: `pass,iteration,elbo,test_logloss,grad_norm_sq,beta,wall_ms`,
//!   one row per pass starting with the initial state at pass 0;
//! * `summary.csv`: a single row of outcome fields;
//! * `config.txt`: `key=value` lines that [`ExperimentConfig::from_snapshot`]
//!   turns back into the same config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;

use super::data::{load_dataset, DataFormat, DatasetBundle, LabelSpec, SplitSpec};
use super::fetch::{cache_dir, fetch_dataset, registry};
use crate::baselines::{named_preset, run_baseline, BaselineConfig, BenchmarkDataset, Hyperparams, OptimizerKind};
use crate::error::{domain, Error, Result};
use crate::estimators::{GradientMode, Sampling};
use crate::linalg::{se_kernel, KernelConfig};
use crate::models::{predictive_logloss, GaussianVariational, GpPrior, ModelSplit};
use crate::solver::{
    run_solver, Method, RunStatus, SolverConfig, SolverRun, SolverTrace, StepSchedule, StopRule, TraceRow,
};

/// Methods reachable from the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodId {
    /// Full-batch PG with quadrature gradients.
    Pg,
    /// Full-batch PG with Monte Carlo gradients.
    PgMc,
    /// Mini-batch PG-SVI with Monte Carlo gradients.
    PgSvi,
    /// Full-covariance proximal step, for cross-checking.
    PgOracle,
    Baseline(OptimizerKind),
}

impl MethodId {
    pub const ALL: [MethodId; 10] = [
        MethodId::Pg,
        MethodId::PgMc,
        MethodId::PgSvi,
        MethodId::PgOracle,
        MethodId::Baseline(OptimizerKind::Gd),
        MethodId::Baseline(OptimizerKind::Sgd),
        MethodId::Baseline(OptimizerKind::Adagrad),
        MethodId::Baseline(OptimizerKind::Rmsprop),
        MethodId::Baseline(OptimizerKind::Adadelta),
        MethodId::Baseline(OptimizerKind::Adam),
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Pg => "pg",
            MethodId::PgMc => "pg-mc",
            MethodId::PgSvi => "pg-svi",
            MethodId::PgOracle => "pg-oracle",
            MethodId::Baseline(k) => k.name(),
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    /// Uses every example per iteration.
    pub fn is_full_batch(self) -> bool {
        matches!(
            self,
            MethodId::Pg | MethodId::PgMc | MethodId::PgOracle | MethodId::Baseline(OptimizerKind::Gd)
        )
    }
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Registry name or file path.
    pub dataset: String,
    pub format: DataFormat,
    pub labels: LabelSpec,
    pub train: usize,
    pub log_length_scale: f64,
    pub log_signal_std: f64,
    pub method: MethodId,
    /// PG step `β` per iteration, or `α₀` for baselines without a preset.
    pub beta: f64,
    /// `kind/dataset` baseline preset; overrides `beta` for baselines.
    pub preset: Option<String>,
    pub minibatch: usize,
    pub gradient: GradientMode,
    pub passes: usize,
    pub threshold: f64,
    pub divergence_guard: bool,
    pub seed: u64,
    pub record_timing: bool,
    pub test_logloss: bool,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults for a registry dataset: its kernel, split, mini-batch size,
    /// sample count and PG-SVI step, plus the matching baseline preset.
    pub fn for_dataset(name: &str, method: MethodId) -> Result<Self> {
        let bench = BenchmarkDataset::from_name(name).ok_or_else(|| domain(format!("unknown dataset '{name}'")))?;
        let source = registry().into_iter().find(|s| s.name == bench.name());
        let (l, s) = bench.kernel_params();
        let n = bench.train_size();
        let preset = match method {
            MethodId::Baseline(k) if k != OptimizerKind::Gd => Some(format!("{}/{}", k.name(), bench.name())),
            _ => None,
        };
        Ok(Self {
            dataset: bench.name().to_string(),
            format: DataFormat::Csv,
            labels: source.map_or(LabelSpec::Numeric, |s| LabelSpec::Positive(s.positive_label.to_string())),
            train: n,
            log_length_scale: l,
            log_signal_std: s,
            method,
            beta: bench.pg_beta_times_n() / n as f64,
            preset,
            minibatch: if method.is_full_batch() { n } else { bench.minibatch() },
            gradient: match method {
                MethodId::Pg | MethodId::PgOracle | MethodId::Baseline(OptimizerKind::Gd) => GradientMode::Quadrature,
                _ => GradientMode::MonteCarlo {
                    samples: bench.mc_samples(),
                },
            },
            passes: 100,
            threshold: 1e-5,
            divergence_guard: true,
            seed: 0,
            record_timing: false,
            test_logloss: true,
            out: None,
        })
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig::new(self.log_length_scale, self.log_signal_std)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(domain(format!("beta must be finite and > 0, got {}", self.beta)));
        }
        if self.minibatch == 0 {
            return Err(domain("minibatch must be >= 1"));
        }
        if self.train == 0 {
            return Err(domain("train size must be >= 1"));
        }
        if !(self.threshold > 0.0) {
            return Err(domain("threshold must be > 0"));
        }
        if let GradientMode::MonteCarlo { samples: 0 } = self.gradient {
            return Err(domain("samples must be >= 1"));
        }
        Ok(())
    }

    /// `key=value` lines covering every field.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("dataset", self.dataset.clone());
        kv("format", self.format.name().into());
        kv(
            "labels",
            match &self.labels {
                LabelSpec::Numeric => "numeric".into(),
                LabelSpec::Positive(p) => format!("positive:{p}"),
            },
        );
        kv("train", self.train.to_string());
        kv("log_length_scale", self.log_length_scale.to_string());
        kv("log_signal_std", self.log_signal_std.to_string());
        kv("method", self.method.name().into());
        kv("beta", self.beta.to_string());
        kv("preset", self.preset.clone().unwrap_or_default());
        kv("minibatch", self.minibatch.to_string());
        kv(
            "gradient",
            match self.gradient {
                GradientMode::Quadrature => "quadrature".into(),
                GradientMode::MonteCarlo { samples } => format!("mc:{samples}"),
            },
        );
        kv("passes", self.passes.to_string());
        kv("threshold", self.threshold.to_string());
        kv("divergence_guard", self.divergence_guard.to_string());
        kv("seed", self.seed.to_string());
        kv("record_timing", self.record_timing.to_string());
        kv("test_logloss", self.test_logloss.to_string());
        kv(
            "out",
            self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        s
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let path = Path::new("config.txt");
        let mut map = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("expected key=value, got '{line}'"),
            })?;
            map.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let get = |k: &str| -> Result<(usize, String)> {
            map.get(k).cloned().ok_or_else(|| domain(format!("config snapshot lacks '{k}'")))
        };
        fn parse<T: std::str::FromStr>(k: &str, (line, v): (usize, String)) -> Result<T> {
            v.parse().map_err(|_| Error::Parse {
                path: "config.txt".into(),
                line,
                message: format!("invalid value '{v}' for {k}"),
            })
        }
        let bad = |k: &str, (line, v): (usize, String)| Error::Parse {
            path: path.into(),
            line,
            message: format!("invalid value '{v}' for {k}"),
        };

        let format = {
            let e = get("format")?;
            DataFormat::from_name(&e.1).ok_or_else(|| bad("format", e))?
        };
        let labels = {
            let e = get("labels")?;
            match e.1.as_str() {
                "numeric" => LabelSpec::Numeric,
                v => match v.strip_prefix("positive:") {
                    Some(p) => LabelSpec::Positive(p.to_string()),
                    None => return Err(bad("labels", e)),
                },
            }
        };
        let method = {
            let e = get("method")?;
            MethodId::from_name(&e.1).ok_or_else(|| bad("method", e))?
        };
        let gradient = {
            let e = get("gradient")?;
            match e.1.as_str() {
                "quadrature" => GradientMode::Quadrature,
                v => match v.strip_prefix("mc:").and_then(|n| n.parse().ok()) {
                    Some(samples) => GradientMode::MonteCarlo { samples },
                    None => return Err(bad("gradient", e)),
                },
            }
        };
        let opt = |k: &str| -> Result<Option<String>> { Ok(Some(get(k)?.1).filter(|s| !s.is_empty())) };
        let cfg = Self {
            dataset: get("dataset")?.1,
            format,
            labels,
            train: parse("train", get("train")?)?,
            log_length_scale: parse("log_length_scale", get("log_length_scale")?)?,
            log_signal_std: parse("log_signal_std", get("log_signal_std")?)?,
            method,
            beta: parse("beta", get("beta")?)?,
            preset: opt("preset")?,
            minibatch: parse("minibatch", get("minibatch")?)?,
            gradient,
            passes: parse("passes", get("passes")?)?,
            threshold: parse("threshold", get("threshold")?)?,
            divergence_guard: parse("divergence_guard", get("divergence_guard")?)?,
            seed: parse("seed", get("seed")?)?,
            record_timing: parse("record_timing", get("record_timing")?)?,
            test_logloss: parse("test_logloss", get("test_logloss")?)?,
            out: opt("out")?.map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn stop(&self) -> StopRule {
        StopRule {
            max_passes: self.passes,
            elbo_delta_threshold: self.threshold,
            divergence_guard: self.divergence_guard,
        }
    }

    fn hyperparams(&self, kind: OptimizerKind, n: usize) -> Result<Hyperparams> {
        if let Some(p) = &self.preset {
            let (k, h) = named_preset(p, n)?;
            if k != kind {
                return Err(domain(format!("preset '{p}' does not belong to {}", kind.name())));
            }
            return Ok(h);
        }
        let a = self.beta;
        Ok(match kind {
            OptimizerKind::Gd => Hyperparams::gd(a),
            OptimizerKind::Sgd => Hyperparams::sgd(a, 0.51),
            OptimizerKind::Adagrad => Hyperparams::adagrad(a),
            OptimizerKind::Rmsprop => Hyperparams::rmsprop(a, 0.9),
            OptimizerKind::Adadelta => Hyperparams::adadelta(a, 1e-6),
            OptimizerKind::Adam => Hyperparams::adam(a, 0.9, 0.999),
        })
    }
}

/// Outcome fields written to `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub method: String,
    pub dataset: String,
    pub status: RunStatus,
    pub passes_to_converge: Option<usize>,
    pub passes_run: usize,
    pub final_elbo: f64,
    pub final_test_logloss: Option<f64>,
    pub clamp_events: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Summary {
    pub fn converged(&self) -> bool {
        self.status == RunStatus::Converged
    }

    pub fn diverged(&self) -> bool {
        self.status == RunStatus::Diverged
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summary: Summary,
    pub trace: SolverTrace,
    pub q: GaussianVariational,
    /// Where the artifacts were written, if anywhere.
    pub dir: Option<PathBuf>,
}

/// A loaded dataset and the GP classification model on its train rows.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub bundle: DatasetBundle,
    pub model: ModelSplit,
    pub x_train: nalgebra::DMatrix<f64>,
    pub x_test: nalgebra::DMatrix<f64>,
    pub y_test: Vec<f64>,
    pub kernel: KernelConfig,
}

fn resolve_path(dataset: &str) -> Result<PathBuf> {
    let p = PathBuf::from(dataset);
    if p.exists() {
        return Ok(p);
    }
    fetch_dataset(dataset, &cache_dir())
}

/// Loads the data and builds the model for `cfg`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let path = resolve_path(&cfg.dataset)?;
    let bundle = load_dataset(
        &path,
        cfg.format,
        &cfg.labels,
        SplitSpec {
            train: cfg.train,
            seed: cfg.seed,
        },
    )?;
    prepare_bundle(bundle, cfg.kernel())
}

pub fn prepare_bundle(bundle: DatasetBundle, kernel: KernelConfig) -> Result<PreparedData> {
    let x_train = bundle.x_train();
    let prior = Arc::new(GpPrior::new(se_kernel(&x_train, &kernel)?)?);
    let model = ModelSplit::gp_classification(prior, bundle.y_train())?;
    Ok(PreparedData {
        x_test: bundle.x_test(),
        y_test: bundle.y_test(),
        x_train,
        model,
        kernel,
        bundle,
    })
}

/// Runs `cfg` on already prepared data; writes artifacts when `cfg.out` is set.
pub fn run_prepared(data: &PreparedData, cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let n = data.model.num_examples();
    let minibatch = if cfg.method.is_full_batch() { n } else { cfg.minibatch };
    let eval = |q: &GaussianVariational| -> Result<f64> {
        Ok(predictive_logloss(&data.model, q, &data.x_train, &data.x_test, &data.y_test, &data.kernel)?.value)
    };
    let evaluator: Option<&dyn Fn(&GaussianVariational) -> Result<f64>> =
        (cfg.test_logloss && !data.y_test.is_empty()).then_some(&eval);

    let run: SolverRun = match cfg.method {
        MethodId::Baseline(kind) => {
            let bc = BaselineConfig {
                kind,
                hyper: cfg.hyperparams(kind, n)?,
                minibatch,
                sampling: if cfg.method.is_full_batch() {
                    Sampling::WithoutReplacement
                } else {
                    Sampling::WithReplacement
                },
                gradient: cfg.gradient,
                stop: cfg.stop(),
                seed: cfg.seed,
                record_timing: cfg.record_timing,
            };
            run_baseline(&data.model, &bc, evaluator)?
        }
        m => {
            let mut sc = match m {
                MethodId::PgSvi => SolverConfig::stochastic(cfg.beta, minibatch, cfg.gradient, cfg.seed),
                MethodId::PgOracle => SolverConfig::full_batch(Method::PgSviOracle, cfg.beta, n),
                _ => SolverConfig::full_batch(Method::PgSviCompact, cfg.beta, n),
            };
            sc.schedule = StepSchedule::constant(cfg.beta);
            sc.gradient = cfg.gradient;
            sc.stop = cfg.stop();
            sc.seed = cfg.seed;
            sc.record_timing = cfg.record_timing;
            run_solver(&data.model, &sc, evaluator)?
        }
    };

    let summary = Summary {
        method: cfg.method.name().to_string(),
        dataset: cfg.dataset.clone(),
        status: run.trace.status,
        passes_to_converge: run.trace.passes_to_converge,
        passes_run: run.trace.rows.last().map_or(0, |r| r.pass),
        final_elbo: run.trace.final_elbo(),
        final_test_logloss: run.trace.rows.iter().rev().find_map(|r| r.test_logloss),
        clamp_events: run.trace.clamp_events,
        beta: cfg.beta,
        seed: cfg.seed,
    };
    let dir = match &cfg.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_trace_csv(&dir.join("trace.csv"), &run.trace.rows)?;
            write_summary_csv(&dir.join("summary.csv"), &summary)?;
            fs::write(dir.join("config.txt"), cfg.snapshot())?;
            info!("{} on {}: {:?} -> {}", summary.method, summary.dataset, summary.status, dir.display());
            Some(dir.clone())
        }
        None => None,
    };
    Ok(ExperimentOutcome {
        summary,
        trace: run.trace,
        q: run.q,
        dir,
    })
}

/// Loads the dataset, runs the method and writes artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = prepare(cfg)?;
    run_prepared(&data, cfg)
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const TRACE_HEADER: [&str; 7] = ["pass", "iteration", "elbo", "test_logloss", "grad_norm_sq", "beta", "wall_ms"];

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    for r in rows {
        w.write_record([
            r.pass.to_string(),
            r.iteration.to_string(),
            r.elbo.to_string(),
            opt_f64(r.test_logloss),
            r.grad_norm_sq.to_string(),
            r.beta.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `trace.csv`; the `seed` field is not stored and reads as 0.
pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_HEADER {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |j: usize| -> Result<&str> {
            rec.get(j).ok_or_else(|| Error::Parse {
                path: path.into(),
                line,
                message: format!("missing column {}", TRACE_HEADER[j]),
            })
        };
        let num = |j: usize| -> Result<f64> {
            let s = field(j)?;
            s.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line,
                message: format!("invalid {} '{s}'", TRACE_HEADER[j]),
            })
        };
        let test = field(3)?;
        rows.push(TraceRow {
            pass: num(0)? as usize,
            iteration: num(1)? as usize,
            elbo: num(2)?,
            test_logloss: if test.is_empty() { None } else { Some(num(3)?) },
            grad_norm_sq: num(4)?,
            beta: num(5)?,
            wall_ms: num(6)?,
            seed: 0,
        });
    }
    Ok(rows)
}

fn status_name(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Converged => "converged",
        RunStatus::BudgetExhausted => "budget_exhausted",
        RunStatus::Diverged => "diverged",
    }
}

pub fn write_summary_csv(path: &Path, s: &Summary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method",
        "dataset",
        "converged",
        "diverged",
        "status",
        "passes_to_converge",
        "passes_run",
        "final_elbo",
        "final_test_logloss",
        "clamp_events",
        "beta",
        "seed",
    ])?;
    w.write_record([
        s.method.clone(),
        s.dataset.clone(),
        s.converged().to_string(),
        s.diverged().to_string(),
        status_name(s.status).to_string(),
        s.passes_to_converge.map(|p| p.to_string()).unwrap_or_default(),
        s.passes_run.to_string(),
        s.final_elbo.to_string(),
        opt_f64(s.final_test_logloss),
        s.clamp_events.to_string(),
        s.beta.to_string(),
        s.seed.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// One cell of a step-size sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub passes_to_converge: Option<usize>,
    pub diverged: bool,
    pub final_elbo: f64,
}

/// Runs `cfg` once per step in `grid` (as `β` for PG methods, `α₀` for
/// baselines). Cells run on scoped threads; each owns its seed and, when
/// `cfg.out` is set, writes to `cell_<i>` under it plus a `sweep.csv` table.
pub fn stepsize_sweep(cfg: &ExperimentConfig, grid: &[f64]) -> Result<Vec<SweepRow>> {
    let data = prepare(cfg)?;
    sweep_prepared(&data, cfg, grid)
}

pub fn sweep_prepared(data: &PreparedData, cfg: &ExperimentConfig, grid: &[f64]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(domain("step-size grid is empty"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(domain("step-size grid must be strictly ascending"));
    }
    let cells: Vec<ExperimentConfig> = grid
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let mut c = cfg.clone();
            c.beta = b;
            c.preset = None;
            c.test_logloss = false;
            c.out = cfg.out.as_ref().map(|d| d.join(format!("cell_{i:03}")));
            c
        })
        .collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cells.len());
    let mut results: Vec<Option<Result<SweepRow>>> = (0..cells.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = cells.len().div_ceil(workers);
        for (cfgs, out) in cells.chunks(chunk).zip(results.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (c, slot) in cfgs.iter().zip(out.iter_mut()) {
                    *slot = Some(run_prepared(data, c).map(|o| SweepRow {
                        beta: c.beta,
                        passes_to_converge: o.summary.passes_to_converge,
                        diverged: o.summary.diverged(),
                        final_elbo: o.summary.final_elbo,
                    }));
                }
            });
        }
    });
    let rows = results
        .into_iter()
        .map(|r| r.expect("every sweep cell runs"))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
        w.write_record(["beta", "passes_to_converge", "diverged", "final_elbo"])?;
        for r in &rows {
            w.write_record([
                r.beta.to_string(),
                r.passes_to_converge.map(|p| p.to_string()).unwrap_or_default(),
                r.diverged.to_string(),
                r.final_elbo.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(rows)
}

/// Largest step in a sweep below which no cell diverged.
pub fn max_stable_step(rows: &[SweepRow]) -> Option<f64> {
    rows.iter().take_while(|r| !r.diverged).last().map(|r| r.beta)
}
