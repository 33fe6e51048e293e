//! Deterministic maximization of the entropic dual: damped Newton with Armijo
//! backtracking, the penalized variant, and continuation in `ε`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dual::{self, check_epsilon, dvec, zeta_of, Derivatives};
use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::Coupling;
use crate::penalty::{Penalty, QuadraticPenalty};
use crate::problem::Problem;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SolveOptions {
    /// Stop once `‖∇J(ζ)‖₂` falls below this.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Ridge `η` added to the Hessian before the Newton solve.
    pub hessian_ridge: f64,
    pub backtrack: f64,
    pub armijo: f64,
    /// `‖λ‖` beyond which the moment class is declared likely infeasible.
    pub lambda_guard: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            grad_tol: 1e-8,
            max_iters: 200,
            hessian_ridge: 1e-10,
            backtrack: 0.5,
            armijo: 1e-4,
            lambda_guard: 1e6,
        }
    }
}

impl SolveOptions {
    fn validate(&self) -> Result<()> {
        let ok = self.grad_tol > 0.0
            && self.max_iters > 0
            && self.hessian_ridge > 0.0
            && self.backtrack > 0.0
            && self.backtrack < 1.0
            && self.armijo > 0.0
            && self.armijo < 1.0
            && self.lambda_guard > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid solve options {self:?}")))
        }
    }
}

/// One Newton iterate: dual objective value and gradient norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterRecord {
    pub value: f64,
    pub grad_norm: f64,
}

/// Penalty-specific results of a penalized solve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PenaltyReport {
    pub kappa: f64,
    /// Achieved moment violation `δ* = ⟨γ2, f̃⟩`.
    pub delta: Vec<f64>,
    /// `‖m^λ − ∇R*(−λ)‖₂`, zero at the optimum.
    pub stationarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    pub epsilon: f64,
    pub lambda_star: Vec<f64>,
    /// Dual objective at `λ*` (including `−R*(−λ)` for penalized solves).
    pub dual_value: f64,
    /// Primal objective of `γ^{λ*}` (including `R(δ*)` for penalized solves).
    pub primal_value: f64,
    pub gap: f64,
    pub transport_cost: f64,
    pub entropy: f64,
    /// `⟨γ2, f⟩ − r`
    pub moment_residual: Vec<f64>,
    pub iterations: usize,
    pub trace: Vec<IterRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty: Option<PenaltyReport>,
}

impl SolveReport {
    pub fn zeta_star(&self) -> Vec<f64> {
        zeta_of(&self.lambda_star, self.epsilon)
    }
}

struct NewtonOutcome {
    zeta: Vec<f64>,
    derivs: Derivatives,
    iterations: usize,
    converged: bool,
    trace: Vec<IterRecord>,
}

/// Minimizes a smooth convex function of `ζ`. `full` returns value, gradient
/// and Hessian; `value` only the value (used by the line search).
fn newton_minimize<F, V>(
    full: F,
    value: V,
    zeta0: Vec<f64>,
    epsilon: f64,
    opts: &SolveOptions,
) -> Result<NewtonOutcome>
where
    F: Fn(&[f64]) -> Derivatives,
    V: Fn(&[f64]) -> f64,
{
    let mut zeta = zeta0;
    let mut d = full(&zeta);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let gnorm = linalg::norm2(&d.grad);
        trace.push(IterRecord { value: -epsilon * d.value, grad_norm: gnorm });
        if gnorm <= opts.grad_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iters {
            break;
        }
        let g = dvec(&d.grad);
        let neg_g: Vec<f64> = d.grad.iter().map(|v| -v).collect();
        let newton_dir = linalg::solve_spd(&d.hessian, &(-&g), opts.hessian_ridge)
            .map(|x| x.as_slice().to_vec())
            .filter(|dir| linalg::dot(dir, &d.grad) < 0.0);
        let mut candidates = Vec::with_capacity(2);
        if let Some(dir) = newton_dir {
            candidates.push(dir);
        }
        candidates.push(neg_g);

        let slack = 1e-14 * (1.0 + d.value.abs());
        let mut accepted = None;
        'dirs: for dir in &candidates {
            let slope = linalg::dot(dir, &d.grad);
            let mut t = 1.0;
            while t > 1e-20 {
                let cand: Vec<f64> = zeta.iter().zip(dir).map(|(z, s)| z + t * s).collect();
                let v = value(&cand);
                if v.is_finite() && v <= d.value + opts.armijo * t * slope + slack {
                    accepted = Some(cand);
                    break 'dirs;
                }
                t *= opts.backtrack;
            }
        }
        let Some(next) = accepted else {
            // No descent possible at working precision.
            break;
        };
        zeta = next;
        iterations += 1;
        let lambda_norm = epsilon * linalg::norm2(&zeta);
        if !(lambda_norm <= opts.lambda_guard) {
            return Err(Error::LikelyInfeasible { lambda_norm });
        }
        d = full(&zeta);
    }
    Ok(NewtonOutcome { zeta, derivs: d, iterations, converged, trace })
}

fn check_lambda(problem: &Problem, lambda: &[f64]) -> Result<()> {
    if lambda.len() != problem.m() {
        return Err(Error::Dimension(format!("lambda has length {}, expected {}", lambda.len(), problem.m())));
    }
    if lambda.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial lambda".into()));
    }
    Ok(())
}

/// Maximizes `φ*(λ) = −⟨μ1, B_{λ,ε}⟩` from `λ = 0`.
pub fn solve_fpr(problem: &Problem, epsilon: f64, opts: &SolveOptions) -> Result<SolveReport> {
    solve_fpr_from(problem, epsilon, &vec![0.0; problem.m()], opts)
}

/// Maximizes `φ*` starting from `lambda0`.
pub fn solve_fpr_from(problem: &Problem, epsilon: f64, lambda0: &[f64], opts: &SolveOptions) -> Result<SolveReport> {
    check_epsilon(epsilon)?;
    opts.validate()?;
    check_lambda(problem, lambda0)?;
    let out = newton_minimize(
        |z| dual::j_derivatives(problem, z, epsilon),
        |z| dual::objective_j(problem, z, epsilon),
        zeta_of(lambda0, epsilon),
        epsilon,
        opts,
    )?;
    let lambda: Vec<f64> = out.zeta.iter().map(|z| epsilon * z).collect();
    let terms = dual::primal_terms(problem, &lambda, epsilon);
    let dual_value = -epsilon * out.derivs.value;
    let primal_value = terms.value(epsilon);
    Ok(SolveReport {
        converged: out.converged,
        epsilon,
        lambda_star: lambda,
        dual_value,
        primal_value,
        gap: primal_value - dual_value,
        transport_cost: terms.transport_cost,
        entropy: terms.entropy,
        moment_residual: out.derivs.grad,
        iterations: out.iterations,
        trace: out.trace,
        penalty: None,
    })
}

/// Maximizes `φ*(λ) − R*(−λ)` for a quadratic penalty.
pub fn solve_fprp(problem: &Problem, epsilon: f64, penalty: &QuadraticPenalty, opts: &SolveOptions) -> Result<SolveReport> {
    solve_fprp_with(problem, epsilon, penalty, opts).map(|mut r| {
        if let Some(p) = r.penalty.as_mut() {
            p.kappa = penalty.kappa;
        }
        r
    })
}

/// Penalized solve for any penalty with a twice differentiable conjugate.
/// The reported `kappa` is `NaN` for non-quadratic penalties.
pub fn solve_fprp_with(problem: &Problem, epsilon: f64, penalty: &dyn Penalty, opts: &SolveOptions) -> Result<SolveReport> {
    check_epsilon(epsilon)?;
    opts.validate()?;
    let neg_lambda = |z: &[f64]| z.iter().map(|v| -epsilon * v).collect::<Vec<f64>>();
    // J_R(ζ) = J(ζ) + ε⁻¹R*(−εζ); ∇J_R = m − ∇R*(−εζ); ∇²J_R = Σ + ε∇²R*(−εζ)
    let full = |z: &[f64]| {
        let mut d = dual::j_derivatives(problem, z, epsilon);
        let x = neg_lambda(z);
        d.value += penalty.conjugate(&x) / epsilon;
        for (g, r) in d.grad.iter_mut().zip(penalty.conjugate_grad(&x)) {
            *g -= r;
        }
        d.hessian += penalty.conjugate_hessian(&x) * epsilon;
        d
    };
    let value = |z: &[f64]| dual::objective_j(problem, z, epsilon) + penalty.conjugate(&neg_lambda(z)) / epsilon;
    // The penalized dual is bounded, so the divergence guard is not meaningful here.
    let opts = SolveOptions { lambda_guard: f64::INFINITY, ..*opts };
    let out = newton_minimize(full, value, vec![0.0; problem.m()], epsilon, &opts)?;

    let lambda: Vec<f64> = out.zeta.iter().map(|z| epsilon * z).collect();
    let neg: Vec<f64> = lambda.iter().map(|l| -l).collect();
    let residual = dual::grad_j(problem, &out.zeta, epsilon);
    let terms = dual::primal_terms(problem, &lambda, epsilon);
    let dual_value = -epsilon * out.derivs.value;
    let primal_value = terms.value(epsilon) + penalty.value(&residual);
    let stationarity: Vec<f64> =
        residual.iter().zip(penalty.conjugate_grad(&neg)).map(|(m, r)| m - r).collect();
    Ok(SolveReport {
        converged: out.converged,
        epsilon,
        lambda_star: lambda,
        dual_value,
        primal_value,
        gap: primal_value - dual_value,
        transport_cost: terms.transport_cost,
        entropy: terms.entropy,
        moment_residual: residual.clone(),
        iterations: out.iterations,
        trace: out.trace,
        penalty: Some(PenaltyReport { kappa: f64::NAN, delta: residual, stationarity: linalg::norm2(&stationarity) }),
    })
}

/// Geometric schedule `ε_k = eps0 · rho^k`, clamped to end exactly at `eps_min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContinuationSchedule {
    pub eps0: f64,
    pub rho: f64,
    pub eps_min: f64,
}

impl Default for ContinuationSchedule {
    fn default() -> Self {
        ContinuationSchedule { eps0: 1.0, rho: 0.5, eps_min: 1e-4 }
    }
}

impl ContinuationSchedule {
    pub fn epsilons(&self) -> Result<Vec<f64>> {
        if !(self.eps0 > 0.0 && self.eps_min > 0.0 && self.eps_min <= self.eps0 && self.rho > 0.0 && self.rho < 1.0)
        {
            return Err(Error::InvalidArgument(format!("invalid continuation schedule {self:?}")));
        }
        let mut out = Vec::new();
        let mut eps = self.eps0;
        while eps > self.eps_min * (1.0 + 1e-12) {
            out.push(eps);
            eps *= self.rho;
        }
        out.push(self.eps_min);
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub epsilon: f64,
    pub converged: bool,
    pub iterations: usize,
    pub lambda: Vec<f64>,
    pub transport_cost: f64,
    pub entropy: f64,
    pub primal_value: f64,
    pub dual_value: f64,
    pub residual_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageFailure {
    pub epsilon: f64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContinuationReport {
    pub stages: Vec<StageReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
    pub final_lambda: Vec<f64>,
    /// `⟨γ^ε, c⟩` at the last completed stage.
    pub final_transport_cost: f64,
    /// Unregularized dual at the final multiplier.
    pub dual_value_fp_final: f64,
    pub dual_value_fp_zero: f64,
}

/// Warm-started OT-FPR solves along a decreasing `ε` schedule. A solver error
/// at some stage ends the run and is recorded in [`ContinuationReport::failure`].
pub fn continuation_fp(problem: &Problem, schedule: &ContinuationSchedule, opts: &SolveOptions) -> Result<ContinuationReport> {
    let epsilons = schedule.epsilons()?;
    let mut lambda = vec![0.0; problem.m()];
    let mut stages = Vec::with_capacity(epsilons.len());
    let mut failure = None;
    for eps in epsilons {
        match solve_fpr_from(problem, eps, &lambda, opts) {
            Ok(r) => {
                lambda = r.lambda_star.clone();
                stages.push(StageReport {
                    epsilon: eps,
                    converged: r.converged,
                    iterations: r.iterations,
                    lambda: r.lambda_star,
                    transport_cost: r.transport_cost,
                    entropy: r.entropy,
                    primal_value: r.primal_value,
                    dual_value: r.dual_value,
                    residual_norm: linalg::norm2(&r.moment_residual),
                });
            }
            Err(e) => {
                failure = Some(StageFailure { epsilon: eps, message: e.to_string() });
                break;
            }
        }
    }
    let final_transport_cost = stages.last().map_or(f64::NAN, |s| s.transport_cost);
    Ok(ContinuationReport {
        dual_value_fp_final: dual::dual_value_fp(problem, &lambda),
        dual_value_fp_zero: dual::dual_value_fp(problem, &vec![0.0; problem.m()]),
        final_lambda: lambda,
        final_transport_cost,
        stages,
        failure,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SlacknessReport {
    /// Largest `c_ij − λᵀf̃_j − ψ^λ(x_i)` over cells carrying mass.
    pub max_violation: f64,
    pub violating_cells: usize,
    pub checked_cells: usize,
}

/// Checks that mass sits where `λᵀf̃(y) + ψ^λ(x) = c(x, y)`: cells with
/// `γ_ij > mass_tol` are compared against `slack_tol`.
pub fn complementary_slackness_check(
    problem: &Problem,
    lambda: &[f64],
    coupling: &Coupling,
    mass_tol: f64,
    slack_tol: f64,
) -> Result<SlacknessReport> {
    check_lambda(problem, lambda)?;
    if coupling.rows() != problem.k1() || coupling.cols() != problem.k2() {
        return Err(Error::Dimension(format!(
            "coupling is {}x{}, problem is {}x{}",
            coupling.rows(),
            coupling.cols(),
            problem.k1(),
            problem.k2()
        )));
    }
    for (i, &w) in problem.mu1().weights().iter().enumerate() {
        let row: f64 = (0..problem.k2()).map(|j| coupling.get(i, j)).sum();
        if (row - w).abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!("coupling row {i} has mass {row}, source weight is {w}")));
        }
    }
    let mut report = SlacknessReport { max_violation: 0.0, violating_cells: 0, checked_cells: 0 };
    for i in 0..problem.k1() {
        let psi = dual::psi_lambda(problem, lambda, i).0;
        for j in 0..problem.k2() {
            if coupling.get(i, j) <= mass_tol {
                continue;
            }
            report.checked_cells += 1;
            let v = -dual::ell0(problem, lambda, i, j) - psi;
            report.max_violation = report.max_violation.max(v);
            if v > slack_tol {
                report.violating_cells += 1;
            }
        }
    }
    Ok(report)
}

/// Hessian of the dual at `λ` as seen by the Newton solver (`ζ` coordinates).
pub fn dual_hessian(problem: &Problem, lambda: &[f64], epsilon: f64) -> DMatrix<f64> {
    dual::hessian_j(problem, &zeta_of(lambda, epsilon), epsilon)
}
