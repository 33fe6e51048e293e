//! Tracking control over a finite-state Markov chain.
//!
//! The source is the law of a nominal path `X = (X_0, …, X_M)` with
//! `X_0 ~ ν0` and `X_i ~ P_i(X_{i−1}, ·)`; the controlled path `Y` starts at
//! `Y_0 = X_0`. Features are `f_i(y) = U(y_i)` and the cost is
//! `Σ_i ½‖x_i − y_i‖²`. For a fixed nominal path the tilted kernel is again
//! Markov, with transition matrices obtained from a backward recursion.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dual::check_epsilon;
use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::{half_sq_dist, inverse_cdf, CostMatrix, DiscreteMeasure, Point};
use crate::penalty::Penalty;
use crate::problem::Problem;
use crate::stochastic::{SAOptions, SATrace};

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovProblem {
    states: Vec<Point>,
    nu0: Vec<f64>,
    kernels: Vec<DMatrix<f64>>,
    utility: Vec<f64>,
    reference: Vec<f64>,
    epsilon: f64,
}

impl MarkovProblem {
    pub fn new(
        states: Vec<Point>,
        nu0: Vec<f64>,
        kernels: Vec<DMatrix<f64>>,
        utility: Vec<f64>,
        reference: Vec<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        let s = states.len();
        if s == 0 {
            return Err(Error::Dimension("no states".into()));
        }
        let dim = states[0].dim();
        if states.iter().any(|p| p.dim() != dim) {
            return Err(Error::Dimension("states have differing dimensions".into()));
        }
        if nu0.len() != s || utility.len() != s {
            return Err(Error::Dimension(format!(
                "nu0 has {} entries and utility {}, expected {s}",
                nu0.len(),
                utility.len()
            )));
        }
        if kernels.is_empty() || kernels.len() != reference.len() {
            return Err(Error::Dimension(format!(
                "{} kernels for {} reference values",
                kernels.len(),
                reference.len()
            )));
        }
        check_epsilon(epsilon)?;
        if utility.iter().chain(&reference).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("utility or reference".into()));
        }
        check_stochastic(&nu0, "nu0")?;
        for (k, p) in kernels.iter().enumerate() {
            if p.nrows() != s || p.ncols() != s {
                return Err(Error::Dimension(format!("kernel {} is {}x{}, expected {s}x{s}", k + 1, p.nrows(), p.ncols())));
            }
            for i in 0..s {
                let row: Vec<f64> = p.row(i).iter().copied().collect();
                check_stochastic(&row, &format!("kernel {} row {i}", k + 1))?;
            }
        }
        Ok(MarkovProblem { states, nu0, kernels, utility, reference, epsilon })
    }

    /// Chain with the same kernel at every step.
    pub fn homogeneous(
        states: Vec<Point>,
        nu0: Vec<f64>,
        kernel: DMatrix<f64>,
        utility: Vec<f64>,
        reference: Vec<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        let kernels = vec![kernel; reference.len()];
        Self::new(states, nu0, kernels, utility, reference, epsilon)
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// Number of steps `M` (and features).
    pub fn horizon(&self) -> usize {
        self.kernels.len()
    }

    pub fn states(&self) -> &[Point] {
        &self.states
    }

    pub fn nu0(&self) -> &[f64] {
        &self.nu0
    }

    pub fn kernels(&self) -> &[DMatrix<f64>] {
        &self.kernels
    }

    pub fn utility(&self) -> &[f64] {
        &self.utility
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(MarkovProblem { epsilon, ..self.clone() })
    }

    pub fn with_reference(&self, reference: Vec<f64>) -> Result<Self> {
        Self::new(self.states.clone(), self.nu0.clone(), self.kernels.clone(), self.utility.clone(), reference, self.epsilon)
    }

    /// Each `r_k` must lie in `[min U, max U]` for the tracking constraints to be satisfiable.
    pub fn check_reference_range(&self) -> Result<()> {
        let lo = self.utility.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.utility.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (k, &r) in self.reference.iter().enumerate() {
            if r < lo || r > hi {
                return Err(Error::TargetOutOfRange { feature: k, target: r, lo, hi });
            }
        }
        Ok(())
    }

    fn check_path(&self, x_path: &[usize]) -> Result<()> {
        if x_path.len() != self.horizon() + 1 {
            return Err(Error::Dimension(format!("path of length {}, expected {}", x_path.len(), self.horizon() + 1)));
        }
        if let Some(&bad) = x_path.iter().find(|&&x| x >= self.num_states()) {
            return Err(Error::InvalidArgument(format!("state index {bad} out of range")));
        }
        Ok(())
    }

    fn check_lambda(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.horizon() {
            return Err(Error::Dimension(format!("lambda has length {}, expected {}", lambda.len(), self.horizon())));
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lambda".into()));
        }
        Ok(())
    }

    /// `L_i(x_i, y') = ε⁻¹{λ_i(U(y') − r_i) − ½‖x_i − y'‖²}` over arrival states `y'`.
    fn log_tilt(&self, lambda: &[f64], x_path: &[usize], i: usize) -> Vec<f64> {
        let xi = self.states[x_path[i]].coords();
        (0..self.num_states())
            .map(|y| {
                let f = self.utility[y] - self.reference[i - 1];
                (lambda[i - 1] * f - half_sq_dist(xi, self.states[y].coords())) / self.epsilon
            })
            .collect()
    }

    fn log_hat(&self, lambda: &[f64], x_path: &[usize]) -> Vec<DMatrix<f64>> {
        let s = self.num_states();
        (1..=self.horizon())
            .map(|i| {
                let l = self.log_tilt(lambda, x_path, i);
                let p = &self.kernels[i - 1];
                DMatrix::from_fn(s, s, |a, b| p[(a, b)].ln() + l[b])
            })
            .collect()
    }

    pub fn sample_path<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut path = Vec::with_capacity(self.horizon() + 1);
        let mut x = inverse_cdf(&self.nu0, rng.random::<f64>());
        path.push(x);
        for p in &self.kernels {
            let row: Vec<f64> = p.row(x).iter().copied().collect();
            x = inverse_cdf(&row, rng.random::<f64>());
            path.push(x);
        }
        path
    }
}

fn check_stochastic(w: &[f64], what: &str) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidWeights(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidWeights(format!("{what} sums to {s}")));
    }
    Ok(())
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Tilted kernels for one nominal path.
#[derive(Clone, Debug, PartialEq)]
pub struct TiltedChain {
    /// `log P̂_i`, `i = 1..M`
    pub log_hat: Vec<DMatrix<f64>>,
    /// `log g_i`, `i = 0..M`
    pub log_g: Vec<DVector<f64>>,
    /// `P̌_i`, `i = 1..M`, row-stochastic
    pub check: Vec<DMatrix<f64>>,
    /// `B = ε log g_0(x_0)`
    pub b: f64,
}

/// `P̂_i = P_i ⊙ exp(L_i)`, `i = 1..M`.
pub fn hat_kernels(problem: &MarkovProblem, lambda: &[f64], x_path: &[usize]) -> Result<Vec<DMatrix<f64>>> {
    problem.check_lambda(lambda)?;
    problem.check_path(x_path)?;
    Ok(problem.log_hat(lambda, x_path).into_iter().map(|m| m.map(f64::exp)).collect())
}

fn backward(problem: &MarkovProblem, log_hat: &[DMatrix<f64>]) -> Result<Vec<DVector<f64>>> {
    let s = problem.num_states();
    let m = problem.horizon();
    let mut log_g = vec![DVector::zeros(s); m + 1];
    for i in (1..=m).rev() {
        let next = log_g[i].clone();
        let lh = &log_hat[i - 1];
        let cur = DVector::from_fn(s, |y, _| log_sum_exp((0..s).map(|z| lh[(y, z)] + next[z])));
        if let Some(state) = cur.iter().position(|v| !v.is_finite()) {
            return Err(Error::ZeroNormalizer { step: i - 1, state });
        }
        log_g[i - 1] = cur;
    }
    Ok(log_g)
}

/// `log g_M ≡ 0`, `log g_{i−1}(y) = log Σ_{y'} P̂_i(y, y') g_i(y')`, and `B = ε log g_0(x_0)`.
pub fn backward_g(problem: &MarkovProblem, lambda: &[f64], x_path: &[usize]) -> Result<(Vec<DVector<f64>>, f64)> {
    problem.check_lambda(lambda)?;
    problem.check_path(x_path)?;
    let log_hat = problem.log_hat(lambda, x_path);
    let log_g = backward(problem, &log_hat)?;
    let b = problem.epsilon * log_g[0][x_path[0]];
    Ok((log_g, b))
}

pub fn tilted_chain(problem: &MarkovProblem, lambda: &[f64], x_path: &[usize]) -> Result<TiltedChain> {
    problem.check_lambda(lambda)?;
    problem.check_path(x_path)?;
    let s = problem.num_states();
    let log_hat = problem.log_hat(lambda, x_path);
    let log_g = backward(problem, &log_hat)?;
    let check = (1..=problem.horizon())
        .map(|i| {
            let lh = &log_hat[i - 1];
            let mut c = DMatrix::from_fn(s, s, |y, z| (lh[(y, z)] + log_g[i][z] - log_g[i - 1][y]).exp());
            for y in 0..s {
                let sum: f64 = c.row(y).sum();
                c.row_mut(y).iter_mut().for_each(|v| *v /= sum);
            }
            c
        })
        .collect();
    let b = problem.epsilon * log_g[0][x_path[0]];
    Ok(TiltedChain { log_hat, log_g, check, b })
}

/// `P̌_i(y, y') = P̂_i(y, y') g_i(y') / g_{i−1}(y)`.
pub fn check_kernels(problem: &MarkovProblem, lambda: &[f64], x_path: &[usize]) -> Result<Vec<DMatrix<f64>>> {
    Ok(tilted_chain(problem, lambda, x_path)?.check)
}

/// Marginals `ν_k` of `Y_k` (`k = 1..M`) under the tilted chain started at `x_0`,
/// and `m̃_k = Σ_y U(y) ν_k(y) − r_k`.
pub fn forward_marginals(problem: &MarkovProblem, lambda: &[f64], x_path: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let chain = tilted_chain(problem, lambda, x_path)?;
    Ok(forward_from_chain(problem, &chain, x_path[0]))
}

fn forward_from_chain(problem: &MarkovProblem, chain: &TiltedChain, x0: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let s = problem.num_states();
    let mut nu = vec![0.0; s];
    nu[x0] = 1.0;
    let mut marginals = Vec::with_capacity(problem.horizon());
    let mut m_tilde = Vec::with_capacity(problem.horizon());
    for (k, c) in chain.check.iter().enumerate() {
        let next: Vec<f64> = (0..s).map(|z| (0..s).map(|y| nu[y] * c[(y, z)]).sum()).collect();
        let eu: f64 = next.iter().zip(&problem.utility).map(|(p, u)| p * u).sum();
        m_tilde.push(eu - problem.reference[k]);
        marginals.push(next.clone());
        nu = next;
    }
    (marginals, m_tilde)
}

/// All `S^M` continuations of `x0`, in lexicographic order, with their probabilities
/// under the nominal kernels.
pub fn enumerate_paths(problem: &MarkovProblem, x0: usize) -> Vec<(Vec<usize>, f64)> {
    let s = problem.num_states();
    let m = problem.horizon();
    let mut out = vec![(vec![x0], 1.0)];
    for i in 0..m {
        out = out
            .into_iter()
            .flat_map(|(path, w)| {
                let last = *path.last().expect("nonempty");
                (0..s).map(move |z| {
                    let mut p = path.clone();
                    p.push(z);
                    (p, w * problem.kernels[i][(last, z)])
                })
            })
            .collect();
    }
    out
}

/// The problem on path space for nominal paths started at `x0`: source and
/// reference are both the nominal path law from `x0`, supports are all `S^M`
/// continuations (flattened coordinates), features are `U(y_k)`.
/// Row and column `k` correspond to `enumerate_paths(problem, x0)[k]`.
pub fn flattened_problem(problem: &MarkovProblem, x0: usize) -> Result<Problem> {
    if x0 >= problem.num_states() {
        return Err(Error::InvalidArgument(format!("state index {x0} out of range")));
    }
    let paths = enumerate_paths(problem, x0);
    let flat = |p: &[usize]| -> Point {
        Point::new(p.iter().flat_map(|&x| problem.states[x].coords().to_vec()).collect()).expect("finite states")
    };
    let support: Vec<Point> = paths.iter().map(|(p, _)| flat(p)).collect();
    let weights: Vec<f64> = paths.iter().map(|(_, w)| *w).collect();
    let mu = DiscreteMeasure::new(support, weights)?;
    let n = paths.len();
    let mut cost = Vec::with_capacity(n * n);
    for a in mu.support() {
        for b in mu.support() {
            cost.push(half_sq_dist(a.coords(), b.coords()));
        }
    }
    let cost = CostMatrix::from_row_major(n, n, cost)?;
    let feats: Vec<Vec<f64>> = paths.iter().map(|(p, _)| p[1..].iter().map(|&y| problem.utility[y]).collect()).collect();
    Problem::from_parts(mu.clone(), mu, cost, feats, problem.reference.clone())
}

/// `Σ_x μ1(x) m̃(x)` by exhaustive enumeration of nominal paths; feasible for small `S^M`.
pub fn exact_mean_residual(problem: &MarkovProblem, lambda: &[f64]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; problem.horizon()];
    for (x0, &w0) in problem.nu0.iter().enumerate() {
        if w0 == 0.0 {
            continue;
        }
        for (path, w) in enumerate_paths(problem, x0) {
            if w == 0.0 {
                continue;
            }
            let (_, mt) = forward_marginals(problem, lambda, &path)?;
            for (a, v) in acc.iter_mut().zip(mt) {
                *a += w0 * w * v;
            }
        }
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackingRow {
    pub k: usize,
    pub reference: f64,
    pub achieved: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackingReport {
    pub epsilon: f64,
    pub lambda: Vec<f64>,
    pub eval_paths: usize,
    pub rows: Vec<TrackingRow>,
    pub max_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackingResult {
    pub trace: SATrace,
    pub report: TrackingReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackingOptions {
    pub sa: SAOptions,
    /// Fresh nominal paths used to estimate `E[U(Y_k)]` at the final multiplier.
    pub eval_paths: usize,
}

impl Default for TrackingOptions {
    fn default() -> Self {
        TrackingOptions { sa: SAOptions { a: 20.0, horizon: 100_000, ..SAOptions::default() }, eval_paths: 20_000 }
    }
}

/// `E[U(Y_k)]` at `lambda`, averaged over the given nominal paths.
pub fn tracking_report(problem: &MarkovProblem, lambda: &[f64], paths: &[Vec<usize>]) -> Result<TrackingReport> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no evaluation paths".into()));
    }
    let per_path: Vec<Vec<f64>> = paths
        .par_iter()
        .map(|p| forward_marginals(problem, lambda, p).map(|(_, mt)| mt))
        .collect::<Result<_>>()?;
    let m = problem.horizon();
    let mut mean = vec![0.0; m];
    for mt in &per_path {
        for (a, v) in mean.iter_mut().zip(mt) {
            *a += v;
        }
    }
    let n = paths.len() as f64;
    let rows: Vec<TrackingRow> = (0..m)
        .map(|k| {
            let achieved = problem.reference[k] + mean[k] / n;
            TrackingRow { k: k + 1, reference: problem.reference[k], achieved, error: (achieved - problem.reference[k]).abs() }
        })
        .collect();
    let max_error = rows.iter().map(|r| r.error).fold(0.0, f64::max);
    Ok(TrackingReport { epsilon: problem.epsilon, lambda: lambda.to_vec(), eval_paths: paths.len(), rows, max_error })
}

/// Stochastic gradient on `ζ = λ/ε` with nominal paths drawn from the source
/// law and `m̃` computed exactly by the forward recursion. Without a penalty,
/// references outside the utility range are rejected up front.
pub fn tracking_solve(problem: &MarkovProblem, penalty: Option<&dyn Penalty>, opts: &TrackingOptions) -> Result<TrackingResult> {
    if penalty.is_none() {
        problem.check_reference_range()?;
    }
    let sa = &opts.sa;
    let m = problem.horizon();
    let eps = problem.epsilon;
    if !(sa.a >= 0.0 && sa.n0 >= 0.0 && sa.record_every > 0 && sa.iterate_guard > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid stochastic options {sa:?}")));
    }
    let mut zeta = match &sa.zeta0 {
        Some(z) if z.len() != m => return Err(Error::Dimension(format!("zeta0 has length {}, expected {m}", z.len()))),
        Some(z) => z.clone(),
        None => vec![0.0; m],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sa.seed);
    let avg_start = sa.horizon / 2;
    let mut avg = vec![0.0; m];
    let mut avg_count = 0usize;
    let mut trace = SATrace {
        epsilon: eps,
        seed: sa.seed,
        steps: vec![0],
        zeta: vec![zeta.clone()],
        drift_norm: vec![0.0],
        final_zeta: Vec::new(),
        averaged_zeta: Vec::new(),
        final_gain: None,
    };
    for n in 0..sa.horizon {
        let path = problem.sample_path(&mut rng);
        let lambda: Vec<f64> = zeta.iter().map(|z| z * eps).collect();
        let (_, mut drift) = forward_marginals(problem, &lambda, &path)?;
        if let Some(p) = penalty {
            let neg: Vec<f64> = lambda.iter().map(|l| -l).collect();
            for (d, g) in drift.iter_mut().zip(p.conjugate_grad(&neg)) {
                *d -= g;
            }
        }
        let alpha = sa.alpha(n + 1);
        for (z, d) in zeta.iter_mut().zip(&drift) {
            *z -= alpha * d;
        }
        let norm = linalg::norm2(&zeta);
        if !(norm <= sa.iterate_guard) {
            return Err(Error::Diverged { step: n + 1, norm });
        }
        if n + 1 > avg_start {
            for (a, z) in avg.iter_mut().zip(&zeta) {
                *a += z;
            }
            avg_count += 1;
        }
        if (n + 1) % sa.record_every == 0 || n + 1 == sa.horizon {
            trace.steps.push(n + 1);
            trace.zeta.push(zeta.clone());
            trace.drift_norm.push(linalg::norm2(&drift));
        }
    }
    trace.averaged_zeta = if avg_count > 0 { avg.iter().map(|a| a / avg_count as f64).collect() } else { zeta.clone() };
    trace.final_zeta = zeta;

    // independent stream for the evaluation draws
    let mut eval_rng = ChaCha8Rng::seed_from_u64(sa.seed);
    eval_rng.set_stream(1);
    let paths: Vec<Vec<usize>> = (0..opts.eval_paths).map(|_| problem.sample_path(&mut eval_rng)).collect();
    let report = tracking_report(problem, &trace.averaged_lambda(), &paths)?;
    Ok(TrackingResult { trace, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pts(xs: &[f64]) -> Vec<Point> {
        xs.iter().map(|&x| Point::scalar(x).unwrap()).collect()
    }

    fn two_state(m: usize, r: f64, eps: f64) -> MarkovProblem {
        let p = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.8]);
        MarkovProblem::homogeneous(pts(&[0.0, 1.0]), vec![0.5, 0.5], p, vec![0.0, 1.0], vec![r; m], eps).unwrap()
    }

    #[test]
    fn hat_kernel_examples() {
        let mp = two_state(2, 0.5, 1.0);
        let h = hat_kernels(&mp, &[0.0, 0.0], &[0, 0, 1]).unwrap();
        let p = &mp.kernels()[0];
        assert_abs_diff_eq!(h[0][(1, 1)], p[(1, 1)] * (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(h[1][(1, 0)], p[(1, 0)] * (-0.5f64).exp(), epsilon = 1e-15);
        // λ_i = ε, U − r ≡ 1, zero cost: P̂ = e·P
        let mp = MarkovProblem::homogeneous(pts(&[0.0, 0.0]), vec![1.0, 0.0], p.clone(), vec![1.0, 1.0], vec![0.0], 0.7).unwrap();
        let h = hat_kernels(&mp, &[0.7], &[0, 1]).unwrap();
        assert!((&h[0] - p * std::f64::consts::E).amax() < 1e-14);
    }

    #[test]
    fn one_step_sum() {
        // P̂ row for x_0 of all ones: P uniform (½) times tilt 2 = exp(ln 2)
        let eps = 0.3;
        let p = DMatrix::from_element(2, 2, 0.5);
        let mp = MarkovProblem::homogeneous(pts(&[0.0, 0.0]), vec![1.0, 0.0], p, vec![1.0, 1.0], vec![0.0], eps).unwrap();
        let lam = [eps * 2f64.ln()];
        let h = hat_kernels(&mp, &lam, &[0, 0]).unwrap();
        assert_abs_diff_eq!(h[0][(0, 1)], 1.0, epsilon = 1e-15);
        let (g, b) = backward_g(&mp, &lam, &[0, 0]).unwrap();
        assert_abs_diff_eq!(g[0][0].exp(), 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(b, eps * 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn infinite_temperature_limits() {
        let mp = two_state(3, 0.5, 1e6);
        let x = [0usize, 1, 1, 0];
        let chain = tilted_chain(&mp, &[0.0; 3], &x).unwrap();
        assert!(chain.log_g[0][0].abs() < 1e-5);
        // B = ε log E[exp(−c/ε)] → −E[c] under the nominal chain from x_0
        let expected_cost: f64 = enumerate_paths(&mp, 0)
            .iter()
            .map(|(y, w)| w * (1..4).map(|i| 0.5 * (x[i] as f64 - y[i] as f64).powi(2)).sum::<f64>())
            .sum();
        assert_abs_diff_eq!(chain.b, -expected_cost, epsilon = 1e-6);
        for (c, p) in chain.check.iter().zip(mp.kernels()) {
            assert!((c - p).amax() < 1e-6);
        }
    }

    #[test]
    fn single_step_check_is_row_softmax() {
        let mp = two_state(1, 0.3, 0.4);
        let chain = tilted_chain(&mp, &[0.9], &[1, 0]).unwrap();
        for y in 0..2 {
            let lh = chain.log_hat[0].row(y);
            let z = log_sum_exp(lh.iter().copied());
            for j in 0..2 {
                assert_abs_diff_eq!(chain.check[0][(y, j)], (lh[j] - z).exp(), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn deterministic_chain_marginals() {
        let perm = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let mp = MarkovProblem::homogeneous(pts(&[0.0, 1.0, 2.0]), vec![1.0, 0.0, 0.0], perm, vec![0.0, 1.0, 2.0], vec![1.0; 3], 0.5)
            .unwrap();
        let (nu, mt) = forward_marginals(&mp, &[0.3, -0.2, 0.1], &[0, 1, 2, 0]).unwrap();
        assert_eq!(nu, vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]);
        assert_eq!(mt, vec![0.0, 1.0, -1.0]);
    }

    #[test]
    fn constant_utility_residual() {
        let p = DMatrix::from_element(2, 2, 0.5);
        let mp = MarkovProblem::homogeneous(pts(&[0.0, 1.0]), vec![0.5, 0.5], p, vec![3.0, 3.0], vec![1.0, 2.5], 1e9).unwrap();
        let (_, mt) = forward_marginals(&mp, &[0.0, 0.0], &[0, 1, 0]).unwrap();
        assert_abs_diff_eq!(mt[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mt[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn validation() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.6, 0.5, 0.5]);
        assert!(MarkovProblem::homogeneous(pts(&[0.0, 1.0]), vec![0.5, 0.5], p, vec![0.0, 1.0], vec![0.5], 1.0).is_err());
        let mp = two_state(2, 0.5, 1.0);
        assert!(forward_marginals(&mp, &[0.0], &[0, 0, 0]).is_err());
        assert!(forward_marginals(&mp, &[0.0, 0.0], &[0, 0]).is_err());
        assert!(forward_marginals(&mp, &[0.0, 0.0], &[0, 0, 2]).is_err());
        assert!(matches!(
            mp.with_reference(vec![2.0, 0.5]).unwrap().check_reference_range(),
            Err(Error::TargetOutOfRange { feature: 0, .. })
        ));
    }

    #[test]
    fn path_sampling_follows_kernels() {
        let perm = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let mp = MarkovProblem::homogeneous(pts(&[0.0, 1.0]), vec![0.0, 1.0], perm, vec![0.0, 1.0], vec![0.5; 4], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(mp.sample_path(&mut rng), vec![1, 0, 1, 0, 1]);
    }
}
