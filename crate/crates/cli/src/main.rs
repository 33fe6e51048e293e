//! `otfp`: batch front end for the feature-projected transport solvers.

mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use otfp::dual;
use otfp::gaussian::{optimal_kernel, GaussianReport};
use otfp::io::{parse_gaussian, parse_markov, parse_problem, LoadedProblem};
use otfp::markov::{tracking_solve, TrackingOptions};
use otfp::solvers::{continuation_fp, solve_fpr, solve_fprp, SolveOptions, SolveReport};
use otfp::stochastic::{sgd_solve, zap_solve, Estimator, SAOptions, SATrace};
use otfp::{Penalty, QuadraticPenalty};

use output::{header, num, Sink};

#[derive(Parser, Debug)]
#[command(name = "otfp", version, about = "Feature-projected optimal transport solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Entropic problem with exact moment constraints.
    SolveFpr,
    /// Entropic problem with a quadratic penalty on moment violations.
    SolveFprp,
    /// Warm-started solves along a decreasing epsilon schedule.
    Continuation,
    /// Closed-form optimal kernel for Gaussian reference measures.
    Gaussian,
    /// Stochastic tracking control on a finite-state Markov chain.
    MarkovTrack,
    /// Validate a problem file and print feasibility heuristics.
    Check,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SolveFpr => "solve-fpr",
            Command::SolveFprp => "solve-fprp",
            Command::Continuation => "continuation",
            Command::Gaussian => "gaussian",
            Command::MarkovTrack => "markov-track",
            Command::Check => "check",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum EstimatorArg {
    Conditional,
    Split,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Method {
    Newton,
    Sgd,
    Zap,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Common {
    /// Problem file (JSON).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "otfp-out")]
    out: PathBuf,
    /// Regularization; overrides the file. For `continuation`, the final epsilon.
    #[arg(long, global = true)]
    eps: Option<f64>,
    /// Quadratic penalty weight; overrides the file.
    #[arg(long, global = true)]
    kappa: Option<f64>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Iteration cap (Newton) or horizon (stochastic methods).
    #[arg(long, global = true)]
    iters: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = EstimatorArg::Conditional)]
    estimator: EstimatorArg,
    /// Samples per step for the split estimator.
    #[arg(long = "K", global = true, default_value_t = 2)]
    k: usize,
    /// Worker threads; defaults to the available parallelism.
    #[serde(skip)]
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Omit the generation time from report.json.
    #[serde(skip)]
    #[arg(long, global = true)]
    no_timestamp: bool,
    #[arg(long, global = true, value_enum, default_value_t = Method::Newton)]
    method: Method,
    /// Step-size constant `a` in `a / (n + n0)` for stochastic methods.
    #[arg(long, global = true)]
    step_a: Option<f64>,
    /// Also write the optimal coupling as coupling.csv.
    #[arg(long, global = true)]
    coupling: bool,
    /// Dual surface box for `check` with two features: `l1min,l1max,l2min,l2max,n`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    dual_grid: Option<String>,
}

/// Failures that map to exit status 2 rather than 1.
#[derive(Debug)]
struct SolveFailure(String);

impl std::fmt::Display for SolveFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SolveFailure {}

enum Outcome {
    Done,
    NotConverged,
}

const FPRP_HINT: &str = "the moment targets look infeasible; try solve-fprp with --kappa to penalize violations instead";
const TRACK_HINT: &str = "the reference looks infeasible; pass --kappa to penalize tracking errors instead";

/// Solver errors that indicate infeasibility become exit-2 failures.
fn classify(e: otfp::Error, hint: &str) -> anyhow::Error {
    match e {
        otfp::Error::LikelyInfeasible { .. } | otfp::Error::TargetOutOfRange { .. } | otfp::Error::Diverged { .. } => {
            SolveFailure(format!("{e}\nhint: {hint}")).into()
        }
        other => other.into(),
    }
}

fn read_input(c: &Common) -> Result<String> {
    let path = c.input.as_ref().ok_or_else(|| anyhow!("--input is required"))?;
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_problem(c: &Common) -> Result<LoadedProblem> {
    let text = read_input(c)?;
    parse_problem(&text).with_context(|| format!("invalid problem file {}", c.input.as_ref().unwrap().display()))
}

fn epsilon(c: &Common, from_file: Option<f64>) -> Result<f64> {
    let eps = c.eps.or(from_file).ok_or_else(|| anyhow!("epsilon: give it in the problem file or with --eps"))?;
    if !(eps.is_finite() && eps > 0.0) {
        bail!("epsilon: must be positive, got {eps}");
    }
    Ok(eps)
}

fn sa_options(c: &Common, default_a: f64, default_horizon: usize) -> SAOptions {
    let horizon = c.iters.unwrap_or(default_horizon);
    SAOptions {
        a: c.step_a.unwrap_or(default_a),
        horizon,
        seed: c.seed,
        estimator: match c.estimator {
            EstimatorArg::Conditional => Estimator::Conditional,
            EstimatorArg::Split => Estimator::Split { k: c.k },
        },
        record_every: (horizon / 1000).max(1),
        ..SAOptions::default()
    }
}

fn write_sa_trace(sink: &mut Sink, trace: &SATrace) -> Result<()> {
    let m = trace.final_zeta.len();
    let mut cols = vec!["n".to_string()];
    cols.extend((1..=m).map(|k| format!("zeta_{k}")));
    cols.push("grad_estimate_norm".into());
    let rows = trace.steps.iter().zip(&trace.zeta).zip(&trace.drift_norm).map(|((n, z), g)| {
        let mut r = vec![n.to_string()];
        r.extend(z.iter().map(|v| num(*v)));
        r.push(num(*g));
        r
    });
    sink.csv("trace.csv", &cols, rows)
}

fn write_newton_trace(sink: &mut Sink, report: &SolveReport) -> Result<()> {
    let rows = report
        .trace
        .iter()
        .enumerate()
        .map(|(k, t)| vec![k.to_string(), num(t.value), num(t.grad_norm)]);
    sink.csv("trace.csv", &header(&["iteration", "dual_value", "grad_norm"]), rows)
}

fn write_coupling(sink: &mut Sink, lp: &LoadedProblem, lambda: &[f64], eps: f64) -> Result<()> {
    let g = dual::tilted_coupling(&lp.problem, lambda, eps);
    let (r, c) = (g.rows(), g.cols());
    let rows = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| vec![i.to_string(), j.to_string(), num(g.get(i, j))]);
    sink.csv("coupling.csv", &header(&["i", "j", "mass"]), rows)
}

#[derive(Serialize)]
struct StochasticResult<'a> {
    method: Method,
    epsilon: f64,
    averaged_lambda: Vec<f64>,
    /// Exact `⟨γ2, f⟩ − r` at the averaged multiplier.
    moment_residual: Vec<f64>,
    moment_residual_norm: f64,
    dual_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    kappa: Option<f64>,
    trace: &'a SATrace,
}

fn run_solve(c: &Common, penalized: bool, sink: &mut Sink) -> Result<Outcome> {
    let lp = load_problem(c)?;
    let eps = epsilon(c, lp.epsilon)?;
    let penalty = if penalized {
        let kappa = c
            .kappa
            .or(lp.penalty.map(|p| p.kappa))
            .ok_or_else(|| anyhow!("kappa: give a penalty in the problem file or with --kappa"))?;
        Some(QuadraticPenalty::new(kappa)?)
    } else {
        lp.problem.check_target_ranges().map_err(|e| classify(e, FPRP_HINT))?;
        None
    };
    let cmd = if penalized { Command::SolveFprp } else { Command::SolveFpr };
    match c.method {
        Method::Newton => {
            let opts = SolveOptions { max_iters: c.iters.unwrap_or(SolveOptions::default().max_iters), ..SolveOptions::default() };
            let report = match &penalty {
                Some(p) => solve_fprp(&lp.problem, eps, p, &opts),
                None => solve_fpr(&lp.problem, eps, &opts),
            }
            .map_err(|e| classify(e, FPRP_HINT))?;
            sink.report(cmd.name(), c, &report)?;
            write_newton_trace(sink, &report)?;
            if c.coupling {
                write_coupling(sink, &lp, &report.lambda_star, eps)?;
            }
            println!(
                "{}: {} after {} iterations; dual {:.10e}, gap {:.3e}, residual {:.3e}, lambda {:?}",
                cmd.name(),
                if report.converged { "converged" } else { "NOT converged" },
                report.iterations,
                report.dual_value,
                report.gap,
                otfp::linalg::norm2(&report.moment_residual),
                report.lambda_star
            );
            Ok(if report.converged { Outcome::Done } else { Outcome::NotConverged })
        }
        Method::Sgd | Method::Zap => {
            let opts = sa_options(c, 1.0, 10_000);
            let pen = penalty.as_ref().map(|p| p as &dyn Penalty);
            let trace = match c.method {
                Method::Sgd => sgd_solve(&lp.problem, eps, pen, &opts),
                _ => zap_solve(&lp.problem, eps, pen, &opts),
            }
            .map_err(|e| classify(e, FPRP_HINT))?;
            let lambda = trace.averaged_lambda();
            let residual = dual::grad_j(&lp.problem, &trace.averaged_zeta, eps);
            let dual_value = match &penalty {
                Some(p) => dual::dual_value_fprp(&lp.problem, &lambda, eps, p),
                None => dual::dual_value_fpr(&lp.problem, &lambda, eps),
            };
            let result = StochasticResult {
                method: c.method,
                epsilon: eps,
                moment_residual_norm: otfp::linalg::norm2(&residual),
                averaged_lambda: lambda.clone(),
                moment_residual: residual,
                dual_value,
                kappa: penalty.map(|p| p.kappa),
                trace: &trace,
            };
            sink.report(cmd.name(), c, &result)?;
            write_sa_trace(sink, &trace)?;
            if c.coupling {
                write_coupling(sink, &lp, &lambda, eps)?;
            }
            println!(
                "{}: {} steps; averaged lambda {:?}, residual {:.3e}",
                cmd.name(),
                opts.horizon,
                result.averaged_lambda,
                result.moment_residual_norm
            );
            Ok(Outcome::Done)
        }
    }
}

fn run_continuation(c: &Common, sink: &mut Sink) -> Result<Outcome> {
    let lp = load_problem(c)?;
    let mut schedule = lp.continuation.unwrap_or_default();
    if let Some(e) = c.eps {
        schedule.eps_min = e;
        schedule.eps0 = schedule.eps0.max(e);
    }
    let opts = SolveOptions { max_iters: c.iters.unwrap_or(SolveOptions::default().max_iters), ..SolveOptions::default() };
    let report = continuation_fp(&lp.problem, &schedule, &opts)?;
    sink.report(Command::Continuation.name(), c, &report)?;
    let rows = report.stages.iter().map(|s| {
        vec![num(s.epsilon), num(s.transport_cost), num(s.entropy), s.converged.to_string(), s.iterations.to_string()]
    });
    sink.csv("continuation.csv", &header(&["epsilon", "transport_cost", "entropy", "converged", "iterations"]), rows)?;
    if c.coupling {
        if let Some(last) = report.stages.last() {
            write_coupling(sink, &lp, &last.lambda, last.epsilon)?;
        }
    }
    println!(
        "continuation: {} stages; final transport cost {:.10e}; unregularized dual {:.10e} (at 0: {:.10e})",
        report.stages.len(),
        report.final_transport_cost,
        report.dual_value_fp_final,
        report.dual_value_fp_zero
    );
    if let Some(f) = &report.failure {
        return Err(SolveFailure(format!("stopped at epsilon {}: {}\nhint: {FPRP_HINT}", f.epsilon, f.message)).into());
    }
    let ok = report.stages.last().is_some_and(|s| s.converged);
    Ok(if ok { Outcome::Done } else { Outcome::NotConverged })
}

fn run_gaussian(c: &Common, sink: &mut Sink) -> Result<Outcome> {
    let text = read_input(c)?;
    let (target, file_eps) = parse_gaussian(&text).context("invalid gaussian file")?;
    let eps = epsilon(c, Some(file_eps))?;
    let k = optimal_kernel(&target, eps)?;
    let report = GaussianReport::from(&k);
    sink.report(Command::Gaussian.name(), c, &report)?;
    println!("gaussian: Sigma_T {:?}; Riccati residual {:.3e}", report.sigma_t, report.riccati_residual);
    Ok(Outcome::Done)
}

fn run_markov(c: &Common, sink: &mut Sink) -> Result<Outcome> {
    let text = read_input(c)?;
    let (mut mp, file_penalty) = parse_markov(&text).context("invalid markov file")?;
    if let Some(e) = c.eps {
        mp = mp.with_epsilon(e)?;
    }
    let penalty = match c.kappa {
        Some(k) => Some(QuadraticPenalty::new(k)?),
        None => file_penalty,
    };
    let opts = TrackingOptions { sa: sa_options(c, 20.0, 100_000), ..TrackingOptions::default() };
    let res = tracking_solve(&mp, penalty.as_ref().map(|p| p as &dyn Penalty), &opts).map_err(|e| classify(e, TRACK_HINT))?;
    sink.report(Command::MarkovTrack.name(), c, &res)?;
    write_sa_trace(sink, &res.trace)?;
    let rows = res.report.rows.iter().map(|r| vec![r.k.to_string(), num(r.reference), num(r.achieved), num(r.error)]);
    sink.csv("tracking.csv", &header(&["k", "reference", "achieved", "error"]), rows)?;
    println!("markov-track: max tracking error {:.3e} over {} evaluation paths", res.report.max_error, res.report.eval_paths);
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct FeatureCheck {
    index: usize,
    target: f64,
    lo: f64,
    hi: f64,
    in_range: bool,
}

#[derive(Serialize)]
struct CheckResult {
    source_atoms: usize,
    target_atoms: usize,
    dimension: usize,
    features: usize,
    epsilon: Option<f64>,
    kappa: Option<f64>,
    feature_covariance_min_eigenvalue: f64,
    covariance_positive_definite: bool,
    targets_in_range: bool,
    ranges: Vec<FeatureCheck>,
}

fn parse_grid(spec: &str) -> Result<(f64, f64, f64, f64, usize)> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        bail!("--dual-grid: expected l1min,l1max,l2min,l2max,n");
    }
    let f = |s: &str| s.parse::<f64>().with_context(|| format!("--dual-grid: bad number {s:?}"));
    let n: usize = parts[4].parse().with_context(|| format!("--dual-grid: bad count {:?}", parts[4]))?;
    if n < 2 {
        bail!("--dual-grid: need at least 2 points per axis");
    }
    Ok((f(parts[0])?, f(parts[1])?, f(parts[2])?, f(parts[3])?, n))
}

fn run_check(c: &Common, sink: &mut Sink) -> Result<Outcome> {
    let lp = load_problem(c)?;
    let p = &lp.problem;
    let min_eig = p.feature_covariance_min_eigenvalue();
    let ranges: Vec<FeatureCheck> = p
        .feature_ranges()
        .into_iter()
        .zip(p.targets())
        .enumerate()
        .map(|(index, ((lo, hi), &target))| FeatureCheck { index, target, lo, hi, in_range: target >= lo && target <= hi })
        .collect();
    let result = CheckResult {
        source_atoms: p.k1(),
        target_atoms: p.k2(),
        dimension: p.mu2().dim(),
        features: p.m(),
        epsilon: c.eps.or(lp.epsilon),
        kappa: c.kappa.or(lp.penalty.map(|q| q.kappa)),
        feature_covariance_min_eigenvalue: min_eig,
        covariance_positive_definite: min_eig > 0.0,
        targets_in_range: ranges.iter().all(|r| r.in_range),
        ranges,
    };
    if let Some(spec) = &c.dual_grid {
        if p.m() != 2 {
            bail!("--dual-grid needs exactly two features, problem has {}", p.m());
        }
        let eps = epsilon(c, lp.epsilon)?;
        let (a0, a1, b0, b1, n) = parse_grid(spec)?;
        let step = |lo: f64, hi: f64, k: usize| lo + (hi - lo) * k as f64 / (n - 1) as f64;
        let cells: Vec<(f64, f64)> =
            (0..n).flat_map(|i| (0..n).map(move |j| (step(a0, a1, i), step(b0, b1, j)))).collect();
        let values: Vec<f64> = cells.par_iter().map(|&(l1, l2)| dual::dual_value_fpr(p, &[l1, l2], eps)).collect();
        let rows = cells.iter().zip(&values).map(|(&(l1, l2), v)| vec![num(l1), num(l2), num(*v)]);
        sink.csv("dual_surface.csv", &header(&["lambda1", "lambda2", "dual_value"]), rows)?;
    }
    sink.report(Command::Check.name(), c, &result)?;
    println!(
        "check: {} source atoms, {} target atoms, dimension {}, {} features",
        result.source_atoms, result.target_atoms, result.dimension, result.features
    );
    println!(
        "check: feature covariance min eigenvalue {:.3e} ({})",
        min_eig,
        if result.covariance_positive_definite { "positive definite" } else { "singular" }
    );
    for r in &result.ranges {
        println!(
            "check: feature {} target {} range [{}, {}] {}",
            r.index,
            r.target,
            r.lo,
            r.hi,
            if r.in_range { "ok" } else { "OUT OF RANGE" }
        );
    }
    Ok(Outcome::Done)
}

fn run(cli: &Cli) -> Result<Outcome> {
    let c = &cli.common;
    if let Some(w) = c.workers {
        if w == 0 {
            bail!("--workers must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().context("configuring worker pool")?;
    }
    let mut sink = Sink::new(&c.out, !c.no_timestamp)?;
    let outcome = match cli.command {
        Command::SolveFpr => run_solve(c, false, &mut sink),
        Command::SolveFprp => run_solve(c, true, &mut sink),
        Command::Continuation => run_continuation(c, &mut sink),
        Command::Gaussian => run_gaussian(c, &mut sink),
        Command::MarkovTrack => run_markov(c, &mut sink),
        Command::Check => run_check(c, &mut sink),
    }?;
    for p in sink.written() {
        eprintln!("wrote {}", p.display());
    }
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => {
            eprintln!("{}: solver did not converge", cli.command.name());
            ExitCode::from(2)
        }
        Err(e) if e.downcast_ref::<SolveFailure>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
