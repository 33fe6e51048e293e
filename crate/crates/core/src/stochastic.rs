//! Stochastic approximation for the dual: i.i.d. source draws, sampled or
//! conditional estimates of the gradient `m^λ` and Hessian `Σ^λ`, and the
//! plain (SGD) and matrix-gain (Zap) recursions in `ζ = λ/ε`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dual::{self, check_epsilon, dvec, zeta_of};
use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::inverse_cdf;
use crate::penalty::Penalty;
use crate::problem::Problem;

/// How `m̃` and `Σ̃` are formed at each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Estimator {
    /// Exact conditional moments of the kernel row at the sampled source atom.
    Conditional,
    /// `k ≥ 2` independent draws from the kernel row.
    Split { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SAOptions {
    /// `α_n = a / (n + n0)`
    pub a: f64,
    pub n0: f64,
    /// `β_n = beta_scale · (n + n0)^{−beta_exponent}`
    pub beta_exponent: f64,
    pub beta_scale: f64,
    pub zeta0: Option<Vec<f64>>,
    /// Initial Zap gain estimate `Σ̄⁰`; identity when absent.
    pub sigma0: Option<Vec<f64>>,
    pub horizon: usize,
    pub seed: u64,
    pub estimator: Estimator,
    /// Keep every `record_every`-th iterate in the trace.
    pub record_every: usize,
    pub iterate_guard: f64,
    pub zap_ridge: f64,
}

impl Default for SAOptions {
    fn default() -> Self {
        SAOptions {
            a: 1.0,
            n0: 100.0,
            beta_exponent: 0.85,
            beta_scale: 1.0,
            zeta0: None,
            sigma0: None,
            horizon: 10_000,
            seed: 0,
            estimator: Estimator::Conditional,
            record_every: 1,
            iterate_guard: 1e8,
            zap_ridge: 1e-8,
        }
    }
}

impl SAOptions {
    pub fn alpha(&self, n: usize) -> f64 {
        self.a / (n as f64 + self.n0)
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.beta_scale * (n as f64 + self.n0).powf(-self.beta_exponent)
    }

    fn validate(&self, m: usize) -> Result<()> {
        let ok = self.a >= 0.0
            && self.n0 >= 0.0
            && self.beta_scale >= 0.0
            && self.beta_exponent > 0.0
            && self.record_every > 0
            && self.iterate_guard > 0.0
            && self.zap_ridge > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid stochastic options {self:?}")));
        }
        if let Estimator::Split { k } = self.estimator {
            if k < 2 {
                return Err(Error::InvalidArgument(format!("split sampling needs K >= 2, got {k}")));
            }
        }
        if let Some(z) = &self.zeta0 {
            if z.len() != m {
                return Err(Error::Dimension(format!("zeta0 has length {}, expected {m}", z.len())));
            }
        }
        if let Some(s) = &self.sigma0 {
            if s.len() != m * m {
                return Err(Error::Dimension(format!("sigma0 has {} entries, expected {}", s.len(), m * m)));
            }
        }
        Ok(())
    }
}

/// Iterates of a stochastic-approximation run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SATrace {
    pub epsilon: f64,
    pub seed: u64,
    /// Step index of each recorded iterate (`0` is the initial point).
    pub steps: Vec<usize>,
    pub zeta: Vec<Vec<f64>>,
    /// `‖m̃ − ∇R*(−εζ)‖₂` of the update that produced each recorded iterate.
    pub drift_norm: Vec<f64>,
    pub final_zeta: Vec<f64>,
    /// Polyak average of `ζ^n` over the second half of the run.
    pub averaged_zeta: Vec<f64>,
    /// Final Zap gain estimate `Σ̄^N`, row-major; absent for SGD.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_gain: Option<Vec<f64>>,
}

impl SATrace {
    pub fn averaged_lambda(&self) -> Vec<f64> {
        self.averaged_zeta.iter().map(|z| z * self.epsilon).collect()
    }
}

/// Index drawn from `T(i, ·)` by inverse CDF over the support order.
pub fn sample_from_kernel<R: Rng + ?Sized>(problem: &Problem, lambda: &[f64], epsilon: f64, i: usize, rng: &mut R) -> usize {
    let row = dual::kernel_row(problem, lambda, epsilon, i);
    inverse_cdf(&row, rng.random::<f64>())
}

/// `(m̃, Σ̃)` from the exact conditional moments at source atom `i`.
pub fn estimator_conditional(problem: &Problem, lambda: &[f64], epsilon: f64, i: usize) -> (Vec<f64>, DMatrix<f64>) {
    let r = dual::row_moments(problem, &zeta_of(lambda, epsilon), epsilon, i);
    (r.mean, r.cov)
}

/// `(m̃, Σ̃)` from `k` independent draws `Y^1..Y^k` of `T(i, ·)`:
/// `m̃ = k⁻¹ Σ f̃(Y^a)`, `Σ̃ = k⁻¹ Σ f(Y^a) f(Y^a)ᵀ − (k² − k)⁻¹ Σ_{a≠b} f(Y^a) f(Y^b)ᵀ`.
pub fn estimator_split<R: Rng + ?Sized>(
    problem: &Problem,
    lambda: &[f64],
    epsilon: f64,
    i: usize,
    k: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("split sampling needs K >= 2, got {k}")));
    }
    let row = dual::kernel_row(problem, lambda, epsilon, i);
    Ok(split_from_row(problem, &row, k, rng))
}

fn split_from_row<R: Rng + ?Sized>(problem: &Problem, row: &[f64], k: usize, rng: &mut R) -> (Vec<f64>, DMatrix<f64>) {
    let m = problem.m();
    let draws: Vec<usize> = (0..k).map(|_| inverse_cdf(row, rng.random::<f64>())).collect();
    let mut mean = vec![0.0; m];
    let mut sum_f = vec![0.0; m];
    let mut second = DMatrix::zeros(m, m);
    for &j in &draws {
        for (a, v) in mean.iter_mut().zip(problem.residual(j)) {
            *a += v;
        }
        let f = problem.feature(j);
        for (s, v) in sum_f.iter_mut().zip(f) {
            *s += v;
        }
        for a in 0..m {
            for b in 0..m {
                second[(a, b)] += f[a] * f[b];
            }
        }
    }
    let kf = k as f64;
    mean.iter_mut().for_each(|v| *v /= kf);
    // Σ_{a≠b} f_a f_bᵀ = S Sᵀ − Σ_a f_a f_aᵀ
    let s = dvec(&sum_f);
    let cross = &s * s.transpose() - &second;
    let sigma = &second / kf - cross / (kf * kf - kf);
    (mean, sigma)
}

/// `Σ̄ + β(Σ̃ − Σ̄)`
pub fn gain_update(sigma_bar: &DMatrix<f64>, sigma_tilde: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    sigma_bar + (sigma_tilde - sigma_bar) * beta
}

enum Gain {
    Identity,
    Zap,
}

/// Stochastic gradient descent on `J` (plus `ε⁻¹R*(−εζ)` with a penalty), gain `G = I`.
pub fn sgd_solve(problem: &Problem, epsilon: f64, penalty: Option<&dyn Penalty>, opts: &SAOptions) -> Result<SATrace> {
    run(problem, epsilon, penalty, opts, Gain::Identity)
}

/// Zap stochastic approximation: gain `G^n = [Σ̄^n]⁻¹` with the two-timescale
/// running estimate `Σ̄^{n+1} = Σ̄^n + β_{n+1}(Σ̃^{n+1} − Σ̄^n)`.
pub fn zap_solve(problem: &Problem, epsilon: f64, penalty: Option<&dyn Penalty>, opts: &SAOptions) -> Result<SATrace> {
    run(problem, epsilon, penalty, opts, Gain::Zap)
}

fn run(problem: &Problem, epsilon: f64, penalty: Option<&dyn Penalty>, opts: &SAOptions, gain: Gain) -> Result<SATrace> {
    check_epsilon(epsilon)?;
    let m = problem.m();
    opts.validate(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut zeta = opts.zeta0.clone().unwrap_or_else(|| vec![0.0; m]);
    let mut sigma_bar = match &opts.sigma0 {
        Some(s) => linalg::symmetrize(&DMatrix::from_row_slice(m, m, s)),
        None => DMatrix::identity(m, m),
    };

    let horizon = opts.horizon;
    let avg_start = horizon / 2;
    let mut avg = vec![0.0; m];
    let mut avg_count = 0usize;

    let mut trace = SATrace {
        epsilon,
        seed: opts.seed,
        steps: vec![0],
        zeta: vec![zeta.clone()],
        drift_norm: vec![0.0],
        final_zeta: Vec::new(),
        averaged_zeta: Vec::new(),
        final_gain: None,
    };
    let mut logits = Vec::with_capacity(problem.k2());

    for n in 0..horizon {
        let i = problem.mu1().inverse_cdf(rng.random::<f64>());
        let need_cov = matches!(gain, Gain::Zap);
        let (m_tilde, sigma_tilde) = match opts.estimator {
            Estimator::Conditional => {
                let r = dual::row_moments(problem, &zeta, epsilon, i);
                (r.mean, need_cov.then_some(r.cov))
            }
            Estimator::Split { k } => {
                let lse = dual::row_logits(problem, &zeta, epsilon, i, &mut logits);
                let mut row: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                let (mean, s) = split_from_row(problem, &row, k, &mut rng);
                (mean, need_cov.then(|| linalg::symmetrize(&s)))
            }
        };

        let neg_lambda: Vec<f64> = zeta.iter().map(|z| -epsilon * z).collect();
        let mut drift = m_tilde;
        if let Some(p) = penalty {
            for (d, g) in drift.iter_mut().zip(p.conjugate_grad(&neg_lambda)) {
                *d -= g;
            }
        }

        let alpha = opts.alpha(n + 1);
        let step: Vec<f64> = match gain {
            Gain::Identity => drift.clone(),
            Gain::Zap => {
                let st = sigma_tilde.expect("covariance estimate");
                sigma_bar = gain_update(&sigma_bar, &st, opts.beta(n + 1));
                let mut g = sigma_bar.clone();
                if let Some(p) = penalty {
                    g += p.conjugate_hessian(&neg_lambda) * epsilon;
                }
                let rhs = dvec(&drift);
                linalg::solve_spd(&g, &rhs, 0.0)
                    .or_else(|| linalg::solve_spd(&g, &rhs, opts.zap_ridge))
                    .map(|x| x.as_slice().to_vec())
                    .unwrap_or_else(|| drift.clone())
            }
        };
        for (z, s) in zeta.iter_mut().zip(&step) {
            *z -= alpha * s;
        }
        let norm = linalg::norm2(&zeta);
        if !(norm <= opts.iterate_guard) {
            return Err(Error::Diverged { step: n + 1, norm });
        }
        if n + 1 > avg_start {
            for (a, z) in avg.iter_mut().zip(&zeta) {
                *a += z;
            }
            avg_count += 1;
        }
        if (n + 1) % opts.record_every == 0 || n + 1 == horizon {
            trace.steps.push(n + 1);
            trace.zeta.push(zeta.clone());
            trace.drift_norm.push(linalg::norm2(&drift));
        }
    }
    trace.averaged_zeta = if avg_count > 0 {
        avg.iter().map(|a| a / avg_count as f64).collect()
    } else {
        zeta.clone()
    };
    trace.final_zeta = zeta;
    if let Gain::Zap = gain {
        trace.final_gain = Some(sigma_bar.transpose().as_slice().to_vec());
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{CostMatrix, DiscreteMeasure, Point};
    use crate::penalty::QuadraticPenalty;

    fn line(xs: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::uniform(xs.iter().map(|&x| Point::scalar(x).unwrap()).collect()).unwrap()
    }

    fn single_atom_target() -> Problem {
        Problem::from_parts(
            line(&[0.0, 1.0]),
            line(&[1.0]),
            CostMatrix::from_row_major(2, 1, vec![0.5, 0.0]).unwrap(),
            vec![vec![1.0]],
            vec![0.25],
        )
        .unwrap()
    }

    #[test]
    fn single_atom_sampling_and_estimators() {
        let p = single_atom_target();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            assert_eq!(sample_from_kernel(&p, &[0.4], 0.5, 1, &mut rng), 0);
        }
        let (m, s) = estimator_conditional(&p, &[0.4], 0.5, 0);
        assert_eq!(m, vec![0.75]);
        assert_eq!(s[(0, 0)], 0.0);
        let (m, s) = estimator_split(&p, &[0.4], 0.5, 0, 2, &mut rng).unwrap();
        assert_eq!(m, vec![0.75]);
        assert_eq!(s[(0, 0)], 0.0);
        assert!(estimator_split(&p, &[0.4], 0.5, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = Problem::from_parts(
            line(&[0.0]),
            line(&[0.0, 1.0, 2.0]),
            CostMatrix::from_row_major(1, 3, vec![0.0, 0.5, 2.0]).unwrap(),
            vec![vec![0.0], vec![1.0], vec![2.0]],
            vec![1.0],
        )
        .unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_from_kernel(&p, &[0.3], 1.0, 0, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn zero_step_keeps_initial_point() {
        let p = single_atom_target();
        let opts = SAOptions { a: 0.0, horizon: 50, zeta0: Some(vec![0.7]), ..Default::default() };
        let t = sgd_solve(&p, 0.5, None, &opts).unwrap();
        assert_eq!(t.final_zeta, vec![0.7]);
        assert!((t.averaged_zeta[0] - 0.7).abs() < 1e-14);
    }

    #[test]
    fn zero_variance_penalized_root() {
        // f̃ ≡ 0.75; stationarity 0.75 − ∇R*(−εζ) = 0.75 + εζ/κ = 0 → ζ = −0.75 κ/ε
        let p = single_atom_target();
        let q = QuadraticPenalty::new(2.0).unwrap();
        let eps = 0.5;
        let root = -0.75 * 2.0 / eps;
        let opts = SAOptions { a: 20.0, horizon: 20_000, ..Default::default() };
        for t in [sgd_solve(&p, eps, Some(&q), &opts).unwrap(), zap_solve(&p, eps, Some(&q), &opts).unwrap()] {
            assert!((t.final_zeta[0] - root).abs() < 1e-3, "{:?}", t.final_zeta);
        }
    }

    #[test]
    fn frozen_gain_stays_at_initial_estimate() {
        let p = single_atom_target();
        let q = QuadraticPenalty::new(1.0).unwrap();
        let opts = SAOptions { beta_scale: 0.0, horizon: 100, sigma0: Some(vec![2.0]), ..Default::default() };
        let t = zap_solve(&p, 1.0, Some(&q), &opts).unwrap();
        assert_eq!(t.final_gain, Some(vec![2.0]));
    }

    #[test]
    fn option_validation() {
        let p = single_atom_target();
        let bad = SAOptions { estimator: Estimator::Split { k: 1 }, ..Default::default() };
        assert!(sgd_solve(&p, 1.0, None, &bad).is_err());
        let bad = SAOptions { zeta0: Some(vec![0.0, 0.0]), ..Default::default() };
        assert!(sgd_solve(&p, 1.0, None, &bad).is_err());
        assert!(sgd_solve(&p, 0.0, None, &SAOptions::default()).is_err());
    }

    #[test]
    fn guard_trips_on_runaway_iterates() {
        // f̃ ≡ 0.75 with no penalty: ζ decreases without bound.
        let p = single_atom_target();
        let opts = SAOptions { a: 1e12, horizon: 10, ..Default::default() };
        assert!(matches!(sgd_solve(&p, 1.0, None, &opts), Err(Error::Diverged { .. })));
    }
}
