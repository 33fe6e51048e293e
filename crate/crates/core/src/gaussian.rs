//! Closed forms for quadratic features, half-squared-Euclidean cost and
//! `μ1 = μ2 = N(0, I)`: the tilted kernel is Gaussian with covariance
//! `Σ_T = [I + ε⁻¹(I − 2Λ²)]⁻¹` and mean `ε⁻¹Σ_T(x + λ¹)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::FeatureSystem;
use crate::linalg;
use crate::measure::{Cost, DiscreteMeasure};
use crate::problem::Problem;

const SYM_TOL: f64 = 1e-9;

fn check_square(a: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::Dimension(format!("{what} is {}x{}, expected {n}x{n}", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} has non-finite entries")));
    }
    let scale = 1.0 + a.amax();
    if (a - a.transpose()).amax() > SYM_TOL * scale {
        return Err(Error::InvalidArgument(format!("{what} is not symmetric")));
    }
    Ok(())
}

fn check_eps(epsilon: f64) -> Result<()> {
    if epsilon.is_finite() && epsilon > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("epsilon must be positive and finite, got {epsilon}")))
    }
}

/// Target first and second moments `(m_Y, M²_Y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    second_moment: DMatrix<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianTarget {
    pub fn new(mean: DVector<f64>, second_moment: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::Dimension("empty target mean".into()));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("target mean".into()));
        }
        check_square(&second_moment, n, "second moment")?;
        let second_moment = linalg::symmetrize(&second_moment);
        let covariance = linalg::symmetrize(&(&second_moment - &mean * mean.transpose()));
        let min = linalg::min_eigenvalue(&covariance);
        if !(min > 0.0) {
            return Err(Error::NotPositiveDefinite(format!("target covariance has eigenvalue {min}")));
        }
        Ok(GaussianTarget { mean, second_moment, covariance })
    }

    /// Target with the given mean and covariance.
    pub fn from_covariance(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let m2 = &covariance + &mean * mean.transpose();
        Self::new(mean, m2)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn second_moment(&self) -> &DMatrix<f64> {
        &self.second_moment
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Targets in the feature order `[y; y_i y_j (i ≤ j)]`.
    pub fn feature_targets(&self) -> Vec<f64> {
        let n = self.dim();
        let mut r: Vec<f64> = self.mean.iter().copied().collect();
        for i in 0..n {
            for j in i..n {
                r.push(self.second_moment[(i, j)]);
            }
        }
        r
    }
}

/// Multiplier split as `λᵀf(y) = yᵀΛ²y + yᵀλ¹`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMultiplier {
    pub lambda1: DVector<f64>,
    pub lambda2: DMatrix<f64>,
}

impl GaussianMultiplier {
    pub fn new(lambda1: DVector<f64>, lambda2: DMatrix<f64>) -> Result<Self> {
        if lambda1.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lambda1".into()));
        }
        check_square(&lambda2, lambda1.len(), "Lambda2")?;
        Ok(GaussianMultiplier { lambda1, lambda2: linalg::symmetrize(&lambda2) })
    }

    pub fn zero(n: usize) -> Self {
        GaussianMultiplier { lambda1: DVector::zeros(n), lambda2: DMatrix::zeros(n, n) }
    }

    pub fn dim(&self) -> usize {
        self.lambda1.len()
    }

    /// Multiplier vector for the features `[y; y_i y_j (i ≤ j)]`.
    pub fn to_feature_lambda(&self) -> Vec<f64> {
        let n = self.dim();
        let mut v: Vec<f64> = self.lambda1.iter().copied().collect();
        for i in 0..n {
            for j in i..n {
                v.push(if i == j { self.lambda2[(i, i)] } else { 2.0 * self.lambda2[(i, j)] });
            }
        }
        v
    }

    pub fn from_feature_lambda(n: usize, lambda: &[f64]) -> Result<Self> {
        if lambda.len() != n + n * (n + 1) / 2 {
            return Err(Error::Dimension(format!("{} multipliers for dimension {n}", lambda.len())));
        }
        let mut l2 = DMatrix::zeros(n, n);
        let mut k = n;
        for i in 0..n {
            for j in i..n {
                let v = if i == j { lambda[k] } else { 0.5 * lambda[k] };
                l2[(i, j)] = v;
                l2[(j, i)] = v;
                k += 1;
            }
        }
        Self::new(DVector::from_column_slice(&lambda[..n]), l2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    pub epsilon: f64,
    pub sigma_t: DMatrix<f64>,
    pub lambda1: DVector<f64>,
}

impl GaussianKernel {
    /// Conditional mean `ε⁻¹Σ_T(x + λ¹)`.
    pub fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.sigma_t * (x + &self.lambda1) / self.epsilon
    }
}

pub fn kernel_from_multiplier(mult: &GaussianMultiplier, epsilon: f64) -> Result<GaussianKernel> {
    check_eps(epsilon)?;
    let n = mult.dim();
    let top = linalg::max_eigenvalue(&mult.lambda2);
    let bound = 0.5 * (1.0 + epsilon);
    if !(top < bound) {
        return Err(Error::InvalidMultiplier(format!(
            "largest eigenvalue of Lambda2 is {top}, must be below {bound}"
        )));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let precision = &eye + (&eye - &mult.lambda2 * 2.0) / epsilon;
    let sigma_t = linalg::spd_inverse(&linalg::symmetrize(&precision))
        .ok_or_else(|| Error::InvalidMultiplier("kernel precision is not invertible".into()))?;
    Ok(GaussianKernel { epsilon, sigma_t: linalg::symmetrize(&sigma_t), lambda1: mult.lambda1.clone() })
}

/// Covariance of `(X, Y)` under `X ~ N(0, I)` and `Y | X` from the kernel:
/// `[[I, ε⁻¹Σ_T], [ε⁻¹Σ_T, Σ_T + ε⁻²Σ_T²]]`.
pub fn joint_covariance(mult: &GaussianMultiplier, epsilon: f64) -> Result<DMatrix<f64>> {
    let k = kernel_from_multiplier(mult, epsilon)?;
    let n = mult.dim();
    let st = &k.sigma_t;
    let cross = st / epsilon;
    let cov_y = linalg::symmetrize(&(st + st * st / (epsilon * epsilon)));
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).fill_with_identity();
    out.view_mut((0, n), (n, n)).copy_from(&cross);
    out.view_mut((n, 0), (n, n)).copy_from(&cross);
    out.view_mut((n, n), (n, n)).copy_from(&cov_y);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimalKernel {
    pub kernel: GaussianKernel,
    pub multiplier: GaussianMultiplier,
    /// Eigenvalues `D` of `Σ_Y` (descending) and the matching `Z`.
    pub d: Vec<f64>,
    pub z: Vec<f64>,
    /// `‖−Σ_T − ε⁻²Σ_T² + Σ_Y‖_F`
    pub riccati_residual: f64,
}

/// `½(−ε² + √(ε⁴ + 4ε²d))`, evaluated without cancellation.
pub fn z_value(d: f64, epsilon: f64) -> f64 {
    let e2 = epsilon * epsilon;
    2.0 * e2 * d / (e2 + (e2 * e2 + 4.0 * e2 * d).sqrt())
}

pub fn riccati_residual(sigma_t: &DMatrix<f64>, sigma_y: &DMatrix<f64>, epsilon: f64) -> f64 {
    (sigma_y - sigma_t - sigma_t * sigma_t / (epsilon * epsilon)).norm()
}

pub fn optimal_kernel(target: &GaussianTarget, epsilon: f64) -> Result<OptimalKernel> {
    check_eps(epsilon)?;
    let n = target.dim();
    let (d, u) = linalg::sym_eigen_sorted(target.covariance());
    let z: Vec<f64> = d.iter().map(|&di| z_value(di, epsilon)).collect();
    let sigma_t = linalg::symmetrize(&linalg::from_eigen(&z, &u));
    let inv_z: Vec<f64> = z.iter().map(|v| 1.0 / v).collect();
    let sigma_t_inv = linalg::symmetrize(&linalg::from_eigen(&inv_z, &u));
    let eye = DMatrix::<f64>::identity(n, n);
    let lambda2 = linalg::symmetrize(&((&eye - (&sigma_t_inv - &eye) * epsilon) * 0.5));
    let lambda1 = &sigma_t_inv * target.mean() * epsilon;
    let residual = riccati_residual(&sigma_t, target.covariance(), epsilon);
    Ok(OptimalKernel {
        kernel: GaussianKernel { epsilon, sigma_t, lambda1: lambda1.clone() },
        multiplier: GaussianMultiplier { lambda1, lambda2 },
        d,
        z,
        riccati_residual: residual,
    })
}

/// `∫ exp(−½yᵀΣ_T⁻¹y + ε⁻¹yᵀ(x + λ¹)) dy`.
pub fn normalizing_constant(mult: &GaussianMultiplier, epsilon: f64, x: &DVector<f64>) -> Result<f64> {
    let k = kernel_from_multiplier(mult, epsilon)?;
    if x.len() != mult.dim() {
        return Err(Error::Dimension(format!("x has length {}, expected {}", x.len(), mult.dim())));
    }
    let n = mult.dim() as f64;
    let v = x + &mult.lambda1;
    let quad = (v.transpose() * &k.sigma_t * &v)[(0, 0)];
    let det = k.sigma_t.determinant();
    Ok(((2.0 * std::f64::consts::PI).powf(n) * det).sqrt() * (0.5 * quad / (epsilon * epsilon)).exp())
}

/// `E[∏_a Y_{idx[a]}]` for `Y ~ N(mean, cov)`, by Stein's identity
/// `E[Y_a g(Y)] = mean_a E[g] + Σ_b cov_ab E[∂_b g]`.
pub fn gaussian_product_moment(idx: &[usize], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let Some((&a, rest)) = idx.split_first() else {
        return 1.0;
    };
    let mut total = mean[a] * gaussian_product_moment(rest, mean, cov);
    for k in 0..rest.len() {
        let mut reduced = rest.to_vec();
        let b = reduced.remove(k);
        total += cov[(a, b)] * gaussian_product_moment(&reduced, mean, cov);
    }
    total
}

/// Index lists of the features `[y; y_i y_j (i ≤ j)]`.
pub fn quadratic_feature_indices(n: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for i in 0..n {
        for j in i..n {
            out.push(vec![i, j]);
        }
    }
    out
}

/// Conditional moments `q(x) = E[f(Y) | x]` and `m(x) = E[f(Y)f(Y)ᵀ | x]`
/// for the features `[y; y_i y_j (i ≤ j)]`.
pub fn gaussian_feature_moments(
    mult: &GaussianMultiplier,
    epsilon: f64,
    x: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = kernel_from_multiplier(mult, epsilon)?;
    if x.len() != mult.dim() {
        return Err(Error::Dimension(format!("x has length {}, expected {}", x.len(), mult.dim())));
    }
    let mean = k.mean(x);
    let feats = quadratic_feature_indices(mult.dim());
    let q = DVector::from_iterator(feats.len(), feats.iter().map(|f| gaussian_product_moment(f, &mean, &k.sigma_t)));
    let mut m = DMatrix::zeros(feats.len(), feats.len());
    for a in 0..feats.len() {
        for b in a..feats.len() {
            let idx: Vec<usize> = feats[a].iter().chain(&feats[b]).copied().collect();
            let v = gaussian_product_moment(&idx, &mean, &k.sigma_t);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    Ok((q, m))
}

/// `N(0, 1)` restricted to `points` equally spaced nodes on `[−half_width, half_width]`,
/// weights proportional to the density.
pub fn standard_normal_grid(points: usize, half_width: f64) -> Result<DiscreteMeasure> {
    if points < 2 || !(half_width > 0.0) {
        return Err(Error::InvalidArgument(format!("grid needs >= 2 points and positive width, got {points}, {half_width}")));
    }
    let h = 2.0 * half_width / (points - 1) as f64;
    let xs: Vec<f64> = (0..points).map(|k| -half_width + h * k as f64).collect();
    let w: Vec<f64> = xs.iter().map(|x| (-0.5 * x * x).exp()).collect();
    let s: f64 = w.iter().sum();
    DiscreteMeasure::from_scalars(&xs, w.iter().map(|v| v / s).collect())
}

/// One-dimensional discretized instance with features `(y, y²)` and the target's moments.
pub fn discretized_problem(target: &GaussianTarget, points: usize, half_width: f64) -> Result<Problem> {
    if target.dim() != 1 {
        return Err(Error::Dimension("discretization is one-dimensional".into()));
    }
    let grid = standard_normal_grid(points, half_width)?;
    let feats = FeatureSystem::first_and_second_moments(1, target.feature_targets())?;
    Problem::new(grid.clone(), grid, Cost::HalfSquaredEuclidean, &feats)
}

/// Serializable summary of an optimal-kernel computation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GaussianReport {
    pub epsilon: f64,
    pub dim: usize,
    pub sigma_t: Vec<Vec<f64>>,
    pub lambda2: Vec<Vec<f64>>,
    pub lambda1: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub z: Vec<f64>,
    pub riccati_residual: f64,
    /// Cross covariance `Cov(X, Y) = ε⁻¹Σ_T` under the optimal coupling.
    pub cross_covariance: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl From<&OptimalKernel> for GaussianReport {
    fn from(k: &OptimalKernel) -> Self {
        GaussianReport {
            epsilon: k.kernel.epsilon,
            dim: k.multiplier.dim(),
            sigma_t: rows(&k.kernel.sigma_t),
            lambda2: rows(&k.multiplier.lambda2),
            lambda1: k.multiplier.lambda1.iter().copied().collect(),
            eigenvalues: k.d.clone(),
            z: k.z.clone(),
            riccati_residual: k.riccati_residual,
            cross_covariance: rows(&(&k.kernel.sigma_t / k.kernel.epsilon)),
        }
    }
}
