//! The `run`, `sweep` and `verify` commands.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sparkle_core::engine::{mean_identity_residuals, Clock, Engine, Hyperparams, LevelPlans, NoClock, RunOutput, StepSchedule, Stepper};
use sparkle_core::hypergrad::{fd_hypergradient, hypergradient, FD_STEP};
use sparkle_core::metrics::{running_average, MetricsContext};
use sparkle_core::problems::{make_single_level, OracleMode, QuadraticObjective};
use sparkle_core::reference::SingleLevelReference;
use sparkle_core::rng::replicate_seed;
use sparkle_core::strategy::Strategy;
use sparkle_core::topology::{build_topology, validate_mixing, TopologyKind};
use sparkle_core::SparkleError;

use crate::config::{ExperimentConfig, StepConfig, TopologySpec};
use crate::error::{CliError, ConfigIssue};
use crate::experiment::{topology_kind, Experiment};
use crate::output::{fmt_f64, write_metrics_file};

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "SPARKLE_THREADS";

/// Worker count from the flag, then the environment; `None` lets rayon choose.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if let Some(t) = flag {
        return Ok(Some(t));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(vec![ConfigIssue::new(THREADS_ENV, format!("expected a thread count, got `{v}`"))])),
        Err(_) => Ok(None),
    }
}

/// Run `f` on a pool of `threads` workers.
pub fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(vec![ConfigIssue::new("--threads", e.to_string())]))?;
    Ok(pool.install(f))
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn now_ns(&mut self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

/// Run one replicate of a resolved experiment.
pub fn run_replicate(exp: &Experiment, ctx: &MetricsContext, replicate: usize) -> Result<RunOutput, SparkleError> {
    let seed = replicate_seed(exp.config.run.master_seed, replicate as u64);
    let engine = Engine::new(&*exp.problem, exp.plans.clone(), exp.hyperparams.clone(), exp.stepper, seed)?;
    let stride = exp.config.run.metrics_stride;
    if exp.config.run.record_wall_time {
        engine.run_with(stride, &mut WallClock(Instant::now()), ctx, |_, _, _| Ok(()))
    } else {
        engine.run_with(stride, &mut NoClock, ctx, |_, _, _| Ok(()))
    }
}

pub fn replicate_file(dir: &Path, stem: &str, replicate: usize) -> PathBuf {
    dir.join(format!("{stem}_r{replicate}.csv"))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}", dir.display()), e))
}

/// Files written by [`cmd_run`].
#[derive(Debug)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
}

/// Run every replicate and write `metrics_r{i}.csv` into the output directory.
pub fn cmd_run(config: ExperimentConfig, threads: Option<usize>) -> Result<RunReport, CliError> {
    let exp = Experiment::resolve(config)?;
    let ctx = MetricsContext::new(&*exp.problem)?;
    let dir = exp.config.run.output.clone();
    create_dir(&dir)?;
    let reps = exp.config.run.replicates;
    let results: Vec<Result<PathBuf, CliError>> = with_pool(threads, || {
        (0..reps)
            .into_par_iter()
            .map(|r| {
                let out = run_replicate(&exp, &ctx, r)?;
                let path = replicate_file(&dir, "metrics", r);
                write_metrics_file(&path, &out.rows)?;
                Ok(path)
            })
            .collect()
    })?;
    let mut files = Vec::new();
    let mut first_err = None;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(p) => files.push(p),
            Err(CliError::Core(e @ SparkleError::Diverged { .. })) => {
                first_err.get_or_insert(CliError::Diverged(format!("replicate {r}: {e}")));
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(RunReport { files }),
    }
}

/// Parameters a sweep can vary.
pub const SWEEP_AXES: [&str; 13] = [
    "n",
    "strategy",
    "upper_strategy",
    "lower_strategy",
    "topology",
    "rho",
    "a",
    "theta",
    "alpha",
    "beta",
    "gamma",
    "batch_size",
    "master_seed",
];

/// `config` with `axis` set to `value`.
pub fn apply_axis(config: &ExperimentConfig, axis: &str, value: &str) -> Result<ExperimentConfig, ConfigIssue> {
    let mut cfg = config.clone();
    let bad = |what: &str| ConfigIssue::new(format!("--values ({axis})"), format!("`{value}` is not {what}"));
    let real = || value.parse::<f64>().map_err(|_| bad("a number"));
    let count = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
    match axis {
        "n" => cfg.problem.set_n(count()?),
        "strategy" => cfg.strategy.set_all(value),
        "upper_strategy" => cfg.strategy.upper = value.to_string(),
        "lower_strategy" => {
            cfg.strategy.lower = value.to_string();
            cfg.strategy.aux = None;
        }
        "topology" => {
            let spec = match value {
                "ring_adjusted" => TopologySpec {
                    kind: Some(value.into()),
                    a: Some(0.5),
                    ..Default::default()
                },
                "torus" => {
                    let n = cfg.problem.n();
                    let side = (n as f64).sqrt().round() as usize;
                    if side * side != n {
                        return Err(ConfigIssue::new("topology.rows", format!("torus sweep needs a square agent count, got n = {n}")));
                    }
                    TopologySpec {
                        kind: Some(value.into()),
                        rows: Some(side),
                        cols: Some(side),
                        ..Default::default()
                    }
                }
                _ => TopologySpec {
                    kind: Some(value.into()),
                    ..Default::default()
                },
            };
            cfg.topology.set_shared(spec);
        }
        "rho" | "a" => {
            let v = real()?;
            cfg.topology.set_shared(TopologySpec {
                kind: Some("ring_adjusted".into()),
                a: (axis == "a").then_some(v),
                rho: (axis == "rho").then_some(v),
                ..Default::default()
            });
        }
        "theta" => cfg.hyperparams.theta = real()?,
        "alpha" => cfg.hyperparams.alpha = StepConfig::Constant(real()?),
        "beta" => cfg.hyperparams.beta = StepConfig::Constant(real()?),
        "gamma" => cfg.hyperparams.gamma = StepConfig::Constant(real()?),
        "batch_size" => cfg.hyperparams.batch_size = count()?,
        "master_seed" => cfg.run.master_seed = value.parse().map_err(|_| bad("a seed"))?,
        other => {
            return Err(ConfigIssue::new(
                "--axis",
                format!("unknown sweep axis `{other}` (expected one of {})", SWEEP_AXES.join(", ")),
            ))
        }
    }
    Ok(cfg)
}

/// Outcome of one replicate of one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub value: String,
    pub replicate: usize,
    pub status: SweepStatus,
    pub file: Option<PathBuf>,
    pub final_k: usize,
    pub running_avg_grad_phi_sq: f64,
    pub final_grad_phi_sq: f64,
    pub final_cons_x: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepStatus {
    Ok,
    ConfigError(String),
    Diverged(String),
    Failed(String),
}

impl fmt::Display for SweepStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepStatus::Ok => write!(f, "ok"),
            SweepStatus::ConfigError(m) => write!(f, "config_error: {m}"),
            SweepStatus::Diverged(m) => write!(f, "diverged: {m}"),
            SweepStatus::Failed(m) => write!(f, "failed: {m}"),
        }
    }
}

#[derive(Debug)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub summary: PathBuf,
}

impl SweepReport {
    /// 2 if any point had a config error, else 3 if any diverged, else 1 on
    /// other failures, else 0.
    pub fn exit_code(&self) -> i32 {
        let has = |f: fn(&SweepStatus) -> bool| self.entries.iter().any(|e| f(&e.status));
        if has(|s| matches!(s, SweepStatus::ConfigError(_))) {
            2
        } else if has(|s| matches!(s, SweepStatus::Diverged(_))) {
            3
        } else if has(|s| matches!(s, SweepStatus::Failed(_))) {
            1
        } else {
            0
        }
    }
}

fn file_safe(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

type Prepared = (Experiment, MetricsContext);

/// Run the experiment once per value of `axis` and write a summary of the
/// final running average of `‖∇Φ‖²` per point.
pub fn cmd_sweep(config: ExperimentConfig, axis: &str, values: &[String], threads: Option<usize>) -> Result<SweepReport, CliError> {
    if !SWEEP_AXES.contains(&axis) {
        return Err(CliError::Config(vec![ConfigIssue::new(
            "--axis",
            format!("unknown sweep axis `{axis}` (expected one of {})", SWEEP_AXES.join(", ")),
        )]));
    }
    if values.is_empty() {
        return Err(CliError::Config(vec![ConfigIssue::new("--values", "need at least one value")]));
    }
    let dir = config.run.output.clone();
    create_dir(&dir)?;

    // Every point is validated before anything runs.
    let points: Vec<(String, Result<Prepared, String>)> = values
        .iter()
        .map(|v| {
            let prepared = apply_axis(&config, axis, v)
                .map_err(|i| i.to_string())
                .and_then(|cfg| Experiment::resolve(cfg).map_err(|e| config_message(&e)))
                .and_then(|exp| {
                    let ctx = MetricsContext::new(&*exp.problem).map_err(|e| e.to_string())?;
                    Ok((exp, ctx))
                });
            (v.clone(), prepared)
        })
        .collect();

    let jobs: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(p, (_, prep))| {
            let reps = prep.as_ref().map(|(e, _)| e.config.run.replicates).unwrap_or(1);
            (0..reps).map(move |r| (p, r))
        })
        .collect();

    let entries: Vec<SweepEntry> = with_pool(threads, || {
        jobs.par_iter()
            .map(|&(p, r)| {
                let (value, prepared) = &points[p];
                let mut entry = SweepEntry {
                    value: value.clone(),
                    replicate: r,
                    status: SweepStatus::Ok,
                    file: None,
                    final_k: 0,
                    running_avg_grad_phi_sq: f64::NAN,
                    final_grad_phi_sq: f64::NAN,
                    final_cons_x: f64::NAN,
                };
                let (exp, ctx) = match prepared {
                    Ok(x) => x,
                    Err(m) => {
                        entry.status = SweepStatus::ConfigError(m.clone());
                        return entry;
                    }
                };
                match run_replicate(exp, ctx, r) {
                    Ok(out) => {
                        let path = replicate_file(&dir, &format!("{axis}-{}", file_safe(value)), r);
                        if let Err(e) = write_metrics_file(&path, &out.rows) {
                            entry.status = SweepStatus::Failed(e.to_string());
                            return entry;
                        }
                        let series: Vec<f64> = out.rows.iter().map(|r| r.grad_phi_sq).collect();
                        let last = out.rows.last().expect("at least one recorded row");
                        entry.file = Some(path);
                        entry.final_k = last.k;
                        entry.running_avg_grad_phi_sq = running_average(&series).unwrap_or(f64::NAN);
                        entry.final_grad_phi_sq = last.grad_phi_sq;
                        entry.final_cons_x = last.cons_x;
                    }
                    Err(e @ SparkleError::Diverged { .. }) => entry.status = SweepStatus::Diverged(e.to_string()),
                    Err(e) => entry.status = SweepStatus::Failed(e.to_string()),
                }
                entry
            })
            .collect()
    })?;

    let summary = dir.join("summary.csv");
    write_summary(&summary, axis, &entries)?;
    Ok(SweepReport { entries, summary })
}

fn config_message(e: &CliError) -> String {
    match e {
        CliError::Config(issues) => issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "),
        other => other.to_string(),
    }
}

fn write_summary(path: &Path, axis: &str, entries: &[SweepEntry]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::io(format!("cannot write {}", path.display()), e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record([
        "axis",
        "value",
        "replicate",
        "status",
        "final_k",
        "running_avg_grad_phi_sq",
        "final_grad_phi_sq",
        "final_cons_x",
        "file",
    ])
    .map_err(io)?;
    for e in entries {
        w.write_record([
            axis.to_string(),
            e.value.clone(),
            e.replicate.to_string(),
            e.status.to_string(),
            e.final_k.to_string(),
            fmt_f64(e.running_avg_grad_phi_sq),
            fmt_f64(e.final_grad_phi_sq),
            fmt_f64(e.final_cons_x),
            e.file
                .as_ref()
                .and_then(|p| p.file_name())
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub status: CheckStatus,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            status: if passed { CheckStatus::Pass } else { CheckStatus::Fail },
            detail: detail.into(),
        }
    }

    fn skip(name: &'static str, detail: impl Into<String>) -> Self {
        Self {
            name,
            status: CheckStatus::Skip,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.status {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skip => "SKIP",
        };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Number of deterministic iterations compared by the equivalence check.
pub const EQUIVALENCE_ITERS: usize = 200;

/// Self-checks of the configured experiment. A failed check does not stop
/// later ones, except that invalid matrices skip everything else.
pub fn cmd_verify(config: ExperimentConfig) -> Result<Vec<CheckOutcome>, CliError> {
    let mut out = Vec::new();
    let n = config.problem.n();

    let mut matrix_failures = Vec::new();
    for (key, spec) in config.topology.levels() {
        let kind = topology_kind(&key, &spec, n).map_err(|i| CliError::Config(vec![i]))?;
        let w = match kind {
            TopologyKind::Custom(w) => w,
            other => build_topology(&other, n)
                .map_err(|e| CliError::Config(vec![ConfigIssue::new(key.clone(), e.to_string())]))?
                .weights()
                .clone(),
        };
        for c in validate_mixing(&w) {
            if !c.passed && !c.informational {
                let msg = format!("{key}: {} ({})", c.name, c.detail);
                if !matrix_failures.contains(&msg) {
                    matrix_failures.push(msg);
                }
            }
        }
    }
    if !matrix_failures.is_empty() {
        out.push(CheckOutcome::new("matrix_validation", false, matrix_failures.join("; ")));
        for name in ["engine_equivalence", "hypergradient_fd", "single_level_degeneration"] {
            out.push(CheckOutcome::skip(name, "mixing matrices are invalid"));
        }
        return Ok(out);
    }

    let exp = Experiment::resolve(config)?;
    let triples: Vec<String> = [("upper", &exp.plans.upper), ("lower", &exp.plans.lower), ("aux", &exp.plans.aux)]
        .iter()
        .filter_map(|(name, plan)| plan.matrices.validate().err().map(|e| format!("{name}: {e}")))
        .collect();
    out.push(if triples.is_empty() {
        CheckOutcome::new("matrix_validation", true, "mixing matrices and strategy triples are valid")
    } else {
        CheckOutcome::new("matrix_validation", false, triples.join("; "))
    });

    out.push(check_equivalence(&exp));
    out.push(check_hypergradient(&exp));
    out.push(check_degeneration(&exp));
    Ok(out)
}

fn check_equivalence(exp: &Experiment) -> CheckOutcome {
    const NAME: &str = "engine_equivalence";
    if exp.strategies.contains(&Strategy::DgdBaseline) {
        return CheckOutcome::skip(NAME, "the dgd baseline has no recursive form");
    }
    let tol = if exp
        .strategies
        .iter()
        .all(|s| matches!(s, Strategy::Ed | Strategy::Extra | Strategy::AtcGt))
    {
        1e-9
    } else {
        1e-8
    };
    let hp = Hyperparams {
        iterations: EQUIVALENCE_ITERS,
        mode: OracleMode::Deterministic,
        ..exp.hyperparams.clone()
    };
    let seed = exp.config.run.master_seed;
    let result = (|| -> Result<f64, SparkleError> {
        let a = Engine::new(&*exp.problem, exp.plans.clone(), hp.clone(), Stepper::Generic, seed)?;
        let b = Engine::new(&*exp.problem, exp.plans.clone(), hp.clone(), Stepper::Recursive, seed)?;
        let (mut sa, mut sb) = (a.init_state(), b.init_state());
        let mut worst = 0.0f64;
        for _ in 0..EQUIVALENCE_ITERS {
            a.step(&mut sa)?;
            b.step(&mut sb)?;
            for (u, v) in [(&sa.x, &sb.x), (&sa.y, &sb.y), (&sa.z, &sb.z)] {
                worst = worst.max((u - v).amax());
            }
        }
        Ok(worst)
    })();
    match result {
        Ok(d) => CheckOutcome::new(NAME, d <= tol, format!("max |generic - recursive| = {d:e} over {EQUIVALENCE_ITERS} iterations (tolerance {tol:e})")),
        Err(e) => CheckOutcome::new(NAME, false, e.to_string()),
    }
}

/// Probes used by the hypergradient check.
pub const FD_PROBES: usize = 5;

fn check_hypergradient(exp: &Experiment) -> CheckOutcome {
    const NAME: &str = "hypergradient_fd";
    let p = exp.problem.upper_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(exp.config.run.master_seed);
    let mut worst_rel = 0.0f64;
    let mut worst_res = 0.0f64;
    for _ in 0..FD_PROBES {
        let x = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let exact = match hypergradient(&*exp.problem, &x) {
            Ok(r) => r,
            Err(e) => return CheckOutcome::new(NAME, false, e.to_string()),
        };
        let fd = match fd_hypergradient(&*exp.problem, &x, FD_STEP) {
            Ok(g) => g,
            Err(e) => return CheckOutcome::new(NAME, false, e.to_string()),
        };
        worst_rel = worst_rel.max((&exact.grad_phi - fd).norm() / exact.grad_phi.norm().max(1.0));
        worst_res = worst_res.max(exact.residual_aux);
    }
    CheckOutcome::new(
        NAME,
        worst_rel <= 1e-4 && worst_res <= 1e-10,
        format!("{FD_PROBES} probes: max relative error {worst_rel:e}, max z* residual {worst_res:e}"),
    )
}

fn check_degeneration(exp: &Experiment) -> CheckOutcome {
    const NAME: &str = "single_level_degeneration";
    const STEPS: usize = 100;
    let n = exp.config.problem.n();
    let seed = exp.config.run.master_seed;
    let result = (|| -> Result<(f64, f64), SparkleError> {
        let inner = QuadraticObjective::random(n, 5, 1.0, 0.1, seed)?;
        let problem = make_single_level(inner.clone(), 2)?;
        let plan = exp.plans.upper.clone();
        let plans = LevelPlans {
            upper: plan.clone(),
            lower: plan.clone(),
            aux: plan.clone(),
        };
        let mut hp = Hyperparams::constant(0.05, 0.05, 0.05, 1.0);
        hp.iterations = STEPS;
        hp.mode = OracleMode::Stochastic;
        let engine = Engine::new(&problem, plans, hp, Stepper::Generic, seed)?;
        let reference = SingleLevelReference::new(&inner, &plan.matrices, StepSchedule::Constant(0.05), 1, OracleMode::Stochastic, seed)?;
        let trace = reference.trace(STEPS);
        let mut state = engine.init_state();
        let (mut lower_norm, mut worst) = (0.0f64, 0.0f64);
        for xs in trace.iter().skip(1) {
            engine.step(&mut state)?;
            lower_norm = lower_norm.max(state.y.amax()).max(state.z.amax());
            for (i, xi) in xs.iter().enumerate() {
                worst = worst.max((state.x.column(i) - xi).amax());
            }
        }
        Ok((lower_norm, worst))
    })();
    match result {
        Ok((lower, diff)) => CheckOutcome::new(
            NAME,
            lower == 0.0 && diff <= 1e-12,
            format!("max |y|,|z| = {lower:e}, max |x - reference| = {diff:e} over {STEPS} stochastic steps"),
        ),
        Err(e) => CheckOutcome::new(NAME, false, e.to_string()),
    }
}

/// Mean-dynamics residual of a full run, used by tests and diagnostics.
pub fn max_mean_identity_residual(exp: &Experiment, seed: u64) -> Result<f64, SparkleError> {
    let engine = Engine::new(&*exp.problem, exp.plans.clone(), exp.hyperparams.clone(), exp.stepper, seed)?;
    let ctx = MetricsContext::new(&*exp.problem)?;
    let mut worst = 0.0f64;
    engine.run_with(exp.config.run.metrics_stride, &mut NoClock, &ctx, |before, after, rec| {
        worst = worst.max(mean_identity_residuals(before, after, rec).max());
        Ok(())
    })?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_values_are_applied() {
        let base = ExperimentConfig::default();
        assert_eq!(apply_axis(&base, "n", "16").unwrap().problem.n(), 16);
        assert_eq!(apply_axis(&base, "theta", "0.25").unwrap().hyperparams.theta, 0.25);
        let cfg = apply_axis(&base, "strategy", "extra").unwrap();
        assert_eq!(cfg.strategies().unwrap(), [Strategy::Extra; 3]);
        let cfg = apply_axis(&base, "rho", "0.9").unwrap();
        assert_eq!(cfg.topology.rho, Some(0.9));
        assert_eq!(cfg.topology.a, None);
    }

    #[test]
    fn bad_axis_inputs_are_config_issues() {
        let base = ExperimentConfig::default();
        assert_eq!(apply_axis(&base, "speed", "1").unwrap_err().key, "--axis");
        assert!(apply_axis(&base, "theta", "high").is_err());
        assert!(apply_axis(&base, "topology", "torus").is_err());
        let cfg = apply_axis(&apply_axis(&base, "n", "16").unwrap(), "topology", "torus").unwrap();
        assert_eq!((cfg.topology.rows, cfg.topology.cols), (Some(4), Some(4)));
    }

    #[test]
    fn file_names_are_sanitized() {
        assert_eq!(file_safe("semi-atc-gt"), "semi-atc-gt");
        assert_eq!(file_safe("a/b c"), "a_b_c");
    }
}
