//! The `M`-dimensional entropic dual: tilt `ℓ₀`, soft minimum `B`, tilted
//! kernel `T^λ`, dual values, and the derivatives of `J(ζ) = ε⁻¹⟨μ1, B_{εζ,ε}⟩`.
//!
//! Solver-facing calculus is written in `ζ = λ/ε`; the `λ`-based functions
//! convert at the boundary. Per-row work is independent across source atoms
//! and runs in parallel, but every reduction sums rows in index order so the
//! results do not depend on the number of worker threads.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::Coupling;
use crate::penalty::Penalty;
use crate::problem::Problem;

/// `ℓ₀^λ(x_i, y_j) = λᵀf̃(y_j) − c(x_i, y_j)`
pub fn ell0(problem: &Problem, lambda: &[f64], i: usize, j: usize) -> f64 {
    linalg::dot(lambda, problem.residual(j)) - problem.cost().get(i, j)
}

pub(crate) fn zeta_of(lambda: &[f64], epsilon: f64) -> Vec<f64> {
    lambda.iter().map(|l| l / epsilon).collect()
}

/// Fills `out[j] = ζᵀf̃(y_j) − c_ij/ε + log μ2_j` and returns the log-sum-exp
/// of the filled values, computed with max subtraction.
pub(crate) fn row_logits(problem: &Problem, zeta: &[f64], epsilon: f64, i: usize, out: &mut Vec<f64>) -> f64 {
    let k2 = problem.k2();
    out.clear();
    out.reserve(k2);
    let cost = problem.cost().row(i);
    let log_mu2 = problem.log_mu2();
    let mut max = f64::NEG_INFINITY;
    for j in 0..k2 {
        let l = linalg::dot(zeta, problem.residual(j)) - cost[j] / epsilon + log_mu2[j];
        max = max.max(l);
        out.push(l);
    }
    let s: f64 = out.iter().map(|l| (l - max).exp()).sum();
    max + s.ln()
}

/// Kernel row `T(i, ·)` from logits; exponentiated and renormalized.
fn probs_from_logits(logits: &[f64], lse: f64) -> Vec<f64> {
    let mut p: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Conditional statistics of `f̃(Y)` given `X = x_i` under the tilted kernel.
#[derive(Clone, Debug)]
pub struct RowMoments {
    /// `log Σ_j μ2_j exp(ζᵀf̃_j − c_ij/ε) = B(x_i)/ε`
    pub log_partition: f64,
    /// `E[f̃(Y) | X = x_i]`
    pub mean: Vec<f64>,
    /// `Cov(f(Y) | X = x_i)`, exactly symmetric.
    pub cov: DMatrix<f64>,
}

/// Conditional mean and covariance of the residual features for one source atom.
pub fn row_moments(problem: &Problem, zeta: &[f64], epsilon: f64, i: usize) -> RowMoments {
    let mut logits = Vec::new();
    let lse = row_logits(problem, zeta, epsilon, i, &mut logits);
    let probs = probs_from_logits(&logits, lse);
    moments_from_probs(problem, &probs, lse)
}

fn moments_from_probs(problem: &Problem, probs: &[f64], lse: f64) -> RowMoments {
    let m = problem.m();
    let mut mean = vec![0.0; m];
    for (j, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (a, f) in mean.iter_mut().zip(problem.residual(j)) {
            *a += p * f;
        }
    }
    let mut cov = DMatrix::zeros(m, m);
    for (j, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let f = problem.residual(j);
        for a in 0..m {
            let da = f[a] - mean[a];
            for b in a..m {
                cov[(a, b)] += p * da * (f[b] - mean[b]);
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    RowMoments { log_partition: lse, mean, cov }
}

/// `B_{λ,ε}(x_i) = ε log Σ_j μ2_j exp(ℓ₀(i, j)/ε)`
pub fn soft_min_b(problem: &Problem, lambda: &[f64], epsilon: f64, i: usize) -> f64 {
    let mut buf = Vec::new();
    epsilon * row_logits(problem, &zeta_of(lambda, epsilon), epsilon, i, &mut buf)
}

/// Row `i` of the tilted kernel: `T(i, j) ∝ μ2_j exp(ℓ₀(i, j)/ε)`.
pub fn kernel_row(problem: &Problem, lambda: &[f64], epsilon: f64, i: usize) -> Vec<f64> {
    kernel_row_zeta(problem, &zeta_of(lambda, epsilon), epsilon, i)
}

pub fn kernel_row_zeta(problem: &Problem, zeta: &[f64], epsilon: f64, i: usize) -> Vec<f64> {
    let mut logits = Vec::new();
    let lse = row_logits(problem, zeta, epsilon, i, &mut logits);
    probs_from_logits(&logits, lse)
}

fn log_partitions(problem: &Problem, zeta: &[f64], epsilon: f64) -> Vec<f64> {
    (0..problem.k1())
        .into_par_iter()
        .map_init(Vec::new, |buf, i| row_logits(problem, zeta, epsilon, i, buf))
        .collect()
}

/// `J(ζ) = Σ_i μ1_i log Σ_j μ2_j exp(ζᵀf̃_j − c_ij/ε)`, convex in `ζ`.
pub fn objective_j(problem: &Problem, zeta: &[f64], epsilon: f64) -> f64 {
    let lp = log_partitions(problem, zeta, epsilon);
    problem.mu1().weights().iter().zip(&lp).map(|(w, l)| w * l).sum()
}

/// `φ*(λ) = −⟨μ1, B_{λ,ε}⟩`
pub fn dual_value_fpr(problem: &Problem, lambda: &[f64], epsilon: f64) -> f64 {
    -epsilon * objective_j(problem, &zeta_of(lambda, epsilon), epsilon)
}

/// `φ*(λ) − R*(−λ)`
pub fn dual_value_fprp(problem: &Problem, lambda: &[f64], epsilon: f64, penalty: &dyn Penalty) -> f64 {
    let neg: Vec<f64> = lambda.iter().map(|l| -l).collect();
    dual_value_fpr(problem, lambda, epsilon) - penalty.conjugate(&neg)
}

/// Value, gradient and Hessian of `J` at `ζ`.
#[derive(Clone, Debug)]
pub struct Derivatives {
    pub value: f64,
    /// `m^λ = E^λ[f̃(Y)]`
    pub grad: Vec<f64>,
    /// `Σ^λ`, the `μ1`-average of the conditional covariance of `f(Y)`.
    pub hessian: DMatrix<f64>,
}

/// All derivatives of `J` in one pass over the source atoms.
pub fn j_derivatives(problem: &Problem, zeta: &[f64], epsilon: f64) -> Derivatives {
    let rows: Vec<RowMoments> =
        (0..problem.k1()).into_par_iter().map(|i| row_moments(problem, zeta, epsilon, i)).collect();
    let m = problem.m();
    let mut value = 0.0;
    let mut grad = vec![0.0; m];
    let mut hessian = DMatrix::zeros(m, m);
    for (w, r) in problem.mu1().weights().iter().zip(&rows) {
        value += w * r.log_partition;
        for (g, v) in grad.iter_mut().zip(&r.mean) {
            *g += w * v;
        }
        hessian += &r.cov * *w;
    }
    Derivatives { value, grad, hessian }
}

/// `∇J(ζ) = m^λ`
pub fn grad_j(problem: &Problem, zeta: &[f64], epsilon: f64) -> Vec<f64> {
    j_derivatives(problem, zeta, epsilon).grad
}

/// `∇²J(ζ) = Σ^λ`
pub fn hessian_j(problem: &Problem, zeta: &[f64], epsilon: f64) -> DMatrix<f64> {
    j_derivatives(problem, zeta, epsilon).hessian
}

/// Raw feature moments `⟨μ1 T^λ, f⟩` of the tilted second marginal.
pub fn tilted_moments(problem: &Problem, lambda: &[f64], epsilon: f64) -> Vec<f64> {
    grad_j(problem, &zeta_of(lambda, epsilon), epsilon)
        .iter()
        .zip(problem.targets())
        .map(|(g, r)| g + r)
        .collect()
}

/// `ψ^λ(x_i) = min_j { c_ij − λᵀf̃_j }` over atoms with positive `μ2` mass,
/// with the lowest index winning ties.
pub fn psi_lambda(problem: &Problem, lambda: &[f64], i: usize) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (j, &w) in problem.mu2().weights().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let v = -ell0(problem, lambda, i, j);
        if v < best.0 {
            best = (v, j);
        }
    }
    best
}

/// Unregularized dual `Σ_i μ1_i ψ^λ(x_i)`; concave and piecewise linear in `λ`.
pub fn dual_value_fp(problem: &Problem, lambda: &[f64]) -> f64 {
    let vals: Vec<f64> = (0..problem.k1()).into_par_iter().map(|i| psi_lambda(problem, lambda, i).0).collect();
    problem.mu1().weights().iter().zip(&vals).map(|(w, v)| w * v).sum()
}

/// Primal quantities of the tilted coupling `γ^λ = μ1 ⊙ T^λ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrimalTerms {
    /// `⟨γ, c⟩`
    pub transport_cost: f64,
    /// `C(γ) = D(γ ‖ μ1 ⊗ μ2)`
    pub entropy: f64,
}

impl PrimalTerms {
    pub fn value(&self, epsilon: f64) -> f64 {
        self.transport_cost + epsilon * self.entropy
    }
}

/// Transport cost and relative entropy of `γ^λ`, accumulated row by row from
/// the kernel without materializing the coupling.
pub fn primal_terms(problem: &Problem, lambda: &[f64], epsilon: f64) -> PrimalTerms {
    let zeta = zeta_of(lambda, epsilon);
    let rows: Vec<(f64, f64)> = (0..problem.k1())
        .into_par_iter()
        .map_init(Vec::new, |buf, i| {
            let lse = row_logits(problem, &zeta, epsilon, i, buf);
            let probs = probs_from_logits(buf, lse);
            let cost = problem.cost().row(i);
            let log_mu2 = problem.log_mu2();
            let mut tc = 0.0;
            let mut ent = 0.0;
            for (j, &p) in probs.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                tc += p * cost[j];
                // log(T_ij / μ2_j) = logit_j − log μ2_j − lse
                ent += p * (buf[j] - log_mu2[j] - lse);
            }
            (tc, ent.max(0.0))
        })
        .collect();
    let mut out = PrimalTerms { transport_cost: 0.0, entropy: 0.0 };
    for (w, (tc, ent)) in problem.mu1().weights().iter().zip(rows) {
        out.transport_cost += w * tc;
        out.entropy += w * ent;
    }
    out
}

/// Dense `γ^λ = μ1 ⊙ T^λ`.
pub fn tilted_coupling(problem: &Problem, lambda: &[f64], epsilon: f64) -> Coupling {
    let zeta = zeta_of(lambda, epsilon);
    let rows: Vec<Vec<f64>> =
        (0..problem.k1()).into_par_iter().map(|i| kernel_row_zeta(problem, &zeta, epsilon, i)).collect();
    let mut gamma = Vec::with_capacity(problem.k1() * problem.k2());
    for (w, row) in problem.mu1().weights().iter().zip(rows) {
        gamma.extend(row.into_iter().map(|t| w * t));
    }
    Coupling::from_parts_unchecked(problem.mu1().support().to_vec(), problem.mu2().support().to_vec(), gamma)
}

/// Relative entropy `D(π ‖ μ2)` of a probability row; `+∞` off the support.
pub fn row_relative_entropy(pi: &[f64], mu2: &[f64]) -> f64 {
    let mut d = 0.0;
    for (&p, &q) in pi.iter().zip(mu2) {
        if p == 0.0 {
            continue;
        }
        if q == 0.0 {
            return f64::INFINITY;
        }
        d += p * (p / q).ln();
    }
    d
}

/// Multiplier, regularization and the cached soft minimum and kernel rows.
#[derive(Clone, Debug)]
pub struct DualState {
    lambda: Vec<f64>,
    epsilon: f64,
    b: Vec<f64>,
    kernel: Vec<Vec<f64>>,
}

/// Serializable snapshot of a [`DualState`].
#[derive(Clone, Debug, Serialize)]
pub struct DualDiagnostics {
    pub lambda: Vec<f64>,
    pub epsilon: f64,
    pub b: Vec<f64>,
    /// `D(T(i, ·) ‖ μ2)` for each source atom.
    pub row_entropies: Vec<f64>,
}

impl DualState {
    pub fn new(problem: &Problem, lambda: &[f64], epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if lambda.len() != problem.m() {
            return Err(Error::Dimension(format!("lambda has length {}, expected {}", lambda.len(), problem.m())));
        }
        let zeta = zeta_of(lambda, epsilon);
        let rows: Vec<(f64, Vec<f64>)> = (0..problem.k1())
            .into_par_iter()
            .map(|i| {
                let mut logits = Vec::new();
                let lse = row_logits(problem, &zeta, epsilon, i, &mut logits);
                (epsilon * lse, probs_from_logits(&logits, lse))
            })
            .collect();
        let (b, kernel) = rows.into_iter().unzip();
        Ok(DualState { lambda: lambda.to_vec(), epsilon, b, kernel })
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn kernel_row(&self, i: usize) -> &[f64] {
        &self.kernel[i]
    }

    pub fn diagnostics(&self, problem: &Problem) -> DualDiagnostics {
        DualDiagnostics {
            lambda: self.lambda.clone(),
            epsilon: self.epsilon,
            b: self.b.clone(),
            row_entropies: self.kernel.iter().map(|row| row_relative_entropy(row, problem.mu2().weights())).collect(),
        }
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    Ok(())
}

/// Column vector helper for nalgebra solves.
pub(crate) fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
