//! A feature-projected transport instance with features evaluated on the target support.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::features::FeatureSystem;
use crate::linalg;
use crate::measure::{cost_matrix, Cost, CostMatrix, DiscreteMeasure, Point};

/// Source `μ1`, reference `μ2`, cost and features, with `f` and `f̃ = f − r`
/// cached on the support of `μ2`.
#[derive(Clone, Debug)]
pub struct Problem {
    mu1: DiscreteMeasure,
    mu2: DiscreteMeasure,
    cost: CostMatrix,
    targets: Vec<f64>,
    // K2 × M, row-major
    features: Vec<f64>,
    residuals: Vec<f64>,
    log_mu2: Vec<f64>,
}

impl Problem {
    pub fn new(mu1: DiscreteMeasure, mu2: DiscreteMeasure, cost: Cost, feats: &FeatureSystem) -> Result<Self> {
        Self::with_cost_fn(mu1, mu2, |x, y| cost.eval(x, y), feats)
    }

    pub fn with_cost_fn<F>(mu1: DiscreteMeasure, mu2: DiscreteMeasure, cost_fn: F, feats: &FeatureSystem) -> Result<Self>
    where
        F: Fn(&Point, &Point) -> f64,
    {
        let cost = cost_matrix(cost_fn, &mu1, &mu2)?;
        let values = mu2.support().iter().map(|p| feats.eval(p)).collect::<Result<Vec<_>>>()?;
        Self::from_parts(mu1, mu2, cost, values, feats.targets().to_vec())
    }

    /// Builds a problem from a precomputed cost matrix and feature values
    /// (`feature_values[j]` is `f(y_j)`).
    pub fn from_parts(
        mu1: DiscreteMeasure,
        mu2: DiscreteMeasure,
        cost: CostMatrix,
        feature_values: Vec<Vec<f64>>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let m = targets.len();
        if m == 0 {
            return Err(Error::InvalidArgument("no features".into()));
        }
        if cost.rows() != mu1.len() || cost.cols() != mu2.len() {
            return Err(Error::Dimension(format!(
                "cost matrix is {}x{}, measures have {} and {} atoms",
                cost.rows(),
                cost.cols(),
                mu1.len(),
                mu2.len()
            )));
        }
        if feature_values.len() != mu2.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows for {} target atoms",
                feature_values.len(),
                mu2.len()
            )));
        }
        let mut features = Vec::with_capacity(mu2.len() * m);
        for row in &feature_values {
            if row.len() != m {
                return Err(Error::Dimension(format!("feature row of length {}, expected {m}", row.len())));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("feature value {v}")));
            }
            features.extend_from_slice(row);
        }
        if let Some(r) = targets.iter().find(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("target {r}")));
        }
        let residuals = features.chunks(m).flat_map(|row| row.iter().zip(&targets).map(|(f, r)| f - r)).collect();
        let log_mu2 = mu2.weights().iter().map(|w| w.ln()).collect();
        Ok(Problem { mu1, mu2, cost, targets, features, residuals, log_mu2 })
    }

    /// Same problem with different moment targets.
    pub fn with_targets(&self, targets: Vec<f64>) -> Result<Self> {
        let values = self.features.chunks(self.m()).map(<[f64]>::to_vec).collect();
        Self::from_parts(self.mu1.clone(), self.mu2.clone(), self.cost.clone(), values, targets)
    }

    pub fn mu1(&self) -> &DiscreteMeasure {
        &self.mu1
    }

    pub fn mu2(&self) -> &DiscreteMeasure {
        &self.mu2
    }

    pub fn cost(&self) -> &CostMatrix {
        &self.cost
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Number of features `M`.
    pub fn m(&self) -> usize {
        self.targets.len()
    }

    pub fn k1(&self) -> usize {
        self.mu1.len()
    }

    pub fn k2(&self) -> usize {
        self.mu2.len()
    }

    /// `f(y_j)`
    pub fn feature(&self, j: usize) -> &[f64] {
        let m = self.m();
        &self.features[j * m..(j + 1) * m]
    }

    /// `f̃(y_j) = f(y_j) − r`
    pub fn residual(&self, j: usize) -> &[f64] {
        let m = self.m();
        &self.residuals[j * m..(j + 1) * m]
    }

    pub(crate) fn log_mu2(&self) -> &[f64] {
        &self.log_mu2
    }

    /// `Cov(f(Y))` for `Y ~ μ2`.
    pub fn feature_covariance(&self) -> DMatrix<f64> {
        let m = self.m();
        let w = self.mu2.weights();
        let mut mean = vec![0.0; m];
        for (j, &wj) in w.iter().enumerate() {
            for (a, f) in mean.iter_mut().zip(self.feature(j)) {
                *a += wj * f;
            }
        }
        let mut cov = DMatrix::zeros(m, m);
        for (j, &wj) in w.iter().enumerate() {
            let f = self.feature(j);
            for a in 0..m {
                for b in a..m {
                    cov[(a, b)] += wj * (f[a] - mean[a]) * (f[b] - mean[b]);
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                cov[(a, b)] = cov[(b, a)];
            }
        }
        cov
    }

    /// Smallest eigenvalue of `Cov_{μ2}(f)`; positive when the features are
    /// affinely independent on the support of `μ2`.
    pub fn feature_covariance_min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.feature_covariance())
    }

    /// Range `[min_j f_k(y_j), max_j f_k(y_j)]` over atoms of positive `μ2` mass.
    pub fn feature_ranges(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); self.m()];
        for (j, &w) in self.mu2.weights().iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, &f) in out.iter_mut().zip(self.feature(j)) {
                o.0 = o.0.min(f);
                o.1 = o.1.max(f);
            }
        }
        out
    }

    /// Targets outside the range of their feature make the moment class empty.
    pub fn check_target_ranges(&self) -> Result<()> {
        for (k, ((lo, hi), &r)) in self.feature_ranges().into_iter().zip(&self.targets).enumerate() {
            if r < lo || r > hi {
                return Err(Error::TargetOutOfRange { feature: k, target: r, lo, hi });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residuals_and_covariance() {
        let mu = DiscreteMeasure::from_scalars(&[0.0, 1.0, 2.0], vec![0.25, 0.5, 0.25]).unwrap();
        let fs = FeatureSystem::first_and_second_moments(1, vec![1.0, 1.5]).unwrap();
        let p = Problem::new(mu.clone(), mu, Cost::HalfSquaredEuclidean, &fs).unwrap();
        assert_eq!(p.residual(2), &[1.0, 2.5]);
        let cov = p.feature_covariance();
        assert!((cov[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(p.feature_covariance_min_eigenvalue() > 0.0);
        assert!(p.check_target_ranges().is_ok());
        assert!(matches!(
            p.with_targets(vec![3.0, 1.0]).unwrap().check_target_ranges(),
            Err(Error::TargetOutOfRange { feature: 0, .. })
        ));
    }

    #[test]
    fn collinear_features_fail_covariance_check() {
        let mu = DiscreteMeasure::from_scalars(&[0.0, 1.0], vec![0.5, 0.5]).unwrap();
        // y and y² coincide on {0, 1}
        let fs = FeatureSystem::first_and_second_moments(1, vec![0.5, 0.5]).unwrap();
        let p = Problem::new(mu.clone(), mu, Cost::HalfSquaredEuclidean, &fs).unwrap();
        assert!(p.feature_covariance_min_eigenvalue().abs() < 1e-12);
    }
}
