//! Feature-projected optimal transport.
//!
//! Couplings `γ` with a fixed first marginal `μ1` are sought whose second
//! marginal satisfies generalized moment constraints `⟨γ2, f⟩ = r`, exactly
//! or through a penalty, with an entropic regularizer `ε D(γ ‖ μ1 ⊗ μ2)`.
//! The regularized problem has a concave dual in `M` variables (one per
//! feature), whose optimizer tilts `μ2` exponentially for each source atom.
//!
//! - [`dual`]: soft minimum, tilted kernel, dual values and derivatives.
//! - [`solvers`]: Newton ascent for the dual, the penalized variant and
//!   continuation `ε ↓ 0` toward the unregularized problem.
//! - [`stochastic`]: stochastic-gradient and Zap solvers with sampled estimators.
//! - [`gaussian`]: closed forms for Gaussian reference measures and quadratic features.
//! - [`markov`]: path-space tracking control with a Markov reference law.
//! - [`io`]: JSON problem files.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dual;
pub mod error;
pub mod features;
pub mod gaussian;
pub mod io;
pub mod linalg;
pub mod markov;
pub mod measure;
pub mod penalty;
pub mod problem;
pub mod solvers;
pub mod stochastic;

pub use error::{Error, Result};
pub use features::{FeatureBlock, FeatureSystem};
pub use measure::{Cost, CostMatrix, Coupling, DiscreteMeasure, Point};
pub use penalty::{Penalty, QuadraticPenalty};
pub use problem::Problem;
