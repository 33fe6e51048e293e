//! Penalties `R(δ)` on moment violations and their convex conjugates `R*`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// A convex penalty vanishing only at the origin, with an everywhere finite,
/// differentiable conjugate.
pub trait Penalty: Send + Sync {
    fn value(&self, delta: &[f64]) -> f64;
    /// `R*(x) = sup_δ { δᵀx − R(δ) }`
    fn conjugate(&self, x: &[f64]) -> f64;
    fn conjugate_grad(&self, x: &[f64]) -> Vec<f64>;
    fn conjugate_hessian(&self, x: &[f64]) -> DMatrix<f64>;
}

/// `R(δ) = κ/2 ‖δ‖²`, `R*(x) = ‖x‖² / (2κ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticPenalty {
    pub kappa: f64,
}

impl QuadraticPenalty {
    pub fn new(kappa: f64) -> crate::Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(crate::Error::InvalidArgument(format!("penalty kappa must be positive, got {kappa}")));
        }
        Ok(QuadraticPenalty { kappa })
    }
}

impl Penalty for QuadraticPenalty {
    fn value(&self, delta: &[f64]) -> f64 {
        0.5 * self.kappa * delta.iter().map(|d| d * d).sum::<f64>()
    }

    fn conjugate(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.kappa)
    }

    fn conjugate_grad(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v / self.kappa).collect()
    }

    fn conjugate_hessian(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(x.len(), x.len()) / self.kappa
    }
}
