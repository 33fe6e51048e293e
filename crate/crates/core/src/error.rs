use thiserror::Error;

/// Errors raised while building problems or running solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("cost function returned negative value {value} at ({i}, {j})")]
    NegativeCost { i: usize, j: usize, value: f64 },

    #[error("relative entropy is infinite: mass {mass} on cell ({i}, {j}) outside the product support")]
    InfiniteDivergence { i: usize, j: usize, mass: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("multiplier norm {lambda_norm:.3e} exceeded the divergence guard; the moment class is likely infeasible")]
    LikelyInfeasible { lambda_norm: f64 },

    #[error("moment target {target} for feature {feature} lies outside the feature range [{lo}, {hi}]")]
    TargetOutOfRange { feature: usize, target: f64, lo: f64, hi: f64 },

    #[error("stochastic iterate diverged at step {step} (norm {norm:.3e})")]
    Diverged { step: usize, norm: f64 },

    #[error("invalid multiplier: {0}")]
    InvalidMultiplier(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("backward recursion produced a zero normalizer at step {step}, state {state}")]
    ZeroNormalizer { step: usize, state: usize },

    #[error("problem file: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
