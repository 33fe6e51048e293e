//! JSON problem files.
//!
//! A transport problem file:
//!
//! ```json
//! {
//!   "source":   { "points": [0.0, 1.0], "weights": [0.5, 0.5] },
//!   "target":   { "points": [[0.0], [1.0], [2.0]] },
//!   "cost": "half-squared-euclidean",
//!   "features": [ { "kind": "linear" }, { "kind": "quadratic-monomials" } ],
//!   "targets": [1.0, 1.5],
//!   "epsilon": 0.1,
//!   "penalty": { "kappa": 10.0 },
//!   "continuation": { "eps0": 1.0, "rho": 0.5, "eps_min": 1e-4 }
//! }
//! ```
//!
//! Points are numbers (one-dimensional) or arrays. Weights default to uniform.
//! Feature kinds are `linear`, `quadratic-monomials`, `indicator-grid`
//! (`axis`, `edges`) and `tabulated` (`values`, one row per target point).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureBlock, FeatureSystem};
use crate::gaussian::GaussianTarget;
use crate::markov::MarkovProblem;
use crate::measure::{Cost, DiscreteMeasure, Point};
use crate::penalty::QuadraticPenalty;
use crate::problem::Problem;
use crate::solvers::ContinuationSchedule;

/// Caps that keep hostile inputs from requesting unbounded memory.
const MAX_CELLS: usize = 20_000_000;
const MAX_DIM: usize = 1_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl PointSpec {
    fn to_point(&self) -> Result<Point> {
        match self {
            PointSpec::Scalar(x) => Point::scalar(*x),
            PointSpec::Vector(v) => {
                if v.is_empty() {
                    return Err(Error::Dimension("empty point".into()));
                }
                Point::new(v.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    pub points: Vec<PointSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl MeasureSpec {
    fn build(&self) -> Result<DiscreteMeasure> {
        let support = self.points.iter().map(PointSpec::to_point).collect::<Result<Vec<_>>>()?;
        if support.first().is_some_and(|p| p.dim() > MAX_DIM) {
            return Err(Error::Dimension(format!("points of dimension above {MAX_DIM}")));
        }
        match &self.weights {
            Some(w) => DiscreteMeasure::new(support, w.clone()),
            None => DiscreteMeasure::uniform(support),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureSpec {
    Linear,
    QuadraticMonomials,
    IndicatorGrid {
        #[serde(default)]
        axis: usize,
        edges: Vec<f64>,
    },
    Tabulated { values: Vec<Vec<f64>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub kappa: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationSpec {
    pub eps0: f64,
    pub rho: f64,
    pub eps_min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub source: MeasureSpec,
    pub target: MeasureSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<String>,
    pub features: Vec<FeatureSpec>,
    pub targets: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<PenaltySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuation: Option<ContinuationSpec>,
}

/// A validated problem file.
#[derive(Clone, Debug)]
pub struct LoadedProblem {
    pub problem: Problem,
    pub epsilon: Option<f64>,
    pub penalty: Option<QuadraticPenalty>,
    pub continuation: Option<ContinuationSchedule>,
}

fn field<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Parse(format!("{name}: {e}")))
}

fn from_json<'a, T: Deserialize<'a>>(text: &'a str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

impl ProblemFile {
    pub fn from_json(text: &str) -> Result<Self> {
        from_json(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem files serialize")
    }

    pub fn build(&self) -> Result<LoadedProblem> {
        let mu1 = field("source", self.source.build())?;
        let mu2 = field("target", self.target.build())?;
        if mu1.dim() != mu2.dim() {
            return Err(Error::Parse(format!(
                "target: points have dimension {}, source points have {}",
                mu2.dim(),
                mu1.dim()
            )));
        }
        if mu1.len().saturating_mul(mu2.len()) > MAX_CELLS {
            return Err(Error::Parse(format!("source/target: more than {MAX_CELLS} coupling cells")));
        }
        let cost = match &self.cost {
            Some(name) => field("cost", Cost::from_name(name))?,
            None => Cost::HalfSquaredEuclidean,
        };
        let dim = mu2.dim();
        let mut blocks = Vec::with_capacity(self.features.len());
        for (k, f) in self.features.iter().enumerate() {
            let block = match f {
                FeatureSpec::Linear => FeatureBlock::Linear { dim },
                FeatureSpec::QuadraticMonomials => FeatureBlock::QuadraticMonomials { dim },
                FeatureSpec::IndicatorGrid { axis, edges } => {
                    if *axis >= dim {
                        return Err(Error::Parse(format!("features[{k}].axis: {axis} out of range for dimension {dim}")));
                    }
                    FeatureBlock::IndicatorGrid { axis: *axis, edges: edges.clone() }
                }
                FeatureSpec::Tabulated { values } => {
                    if values.len() != mu2.len() {
                        return Err(Error::Parse(format!(
                            "features[{k}].values: {} rows for {} target points",
                            values.len(),
                            mu2.len()
                        )));
                    }
                    let width = values.first().map_or(0, Vec::len);
                    FeatureBlock::Tabulated { points: mu2.support().to_vec(), values: values.clone(), width }
                }
            };
            blocks.push(block);
        }
        let m: usize = blocks.iter().map(FeatureBlock::width).fold(0usize, usize::saturating_add);
        if m.saturating_mul(mu2.len()) > MAX_CELLS {
            return Err(Error::Parse(format!("features: more than {MAX_CELLS} feature values")));
        }
        let feats = field("features", FeatureSystem::new(blocks, self.targets.clone()))?;
        let problem = field("features", Problem::new(mu1, mu2, cost, &feats))?;
        let epsilon = match self.epsilon {
            Some(e) if !(e.is_finite() && e > 0.0) => {
                return Err(Error::Parse(format!("epsilon: must be positive, got {e}")));
            }
            e => e,
        };
        let penalty = self.penalty.map(|p| field("penalty.kappa", QuadraticPenalty::new(p.kappa))).transpose()?;
        let continuation = self
            .continuation
            .map(|c| {
                let s = ContinuationSchedule { eps0: c.eps0, rho: c.rho, eps_min: c.eps_min };
                field("continuation", s.epsilons()).map(|_| s)
            })
            .transpose()?;
        Ok(LoadedProblem { problem, epsilon, penalty, continuation })
    }
}

pub fn parse_problem(text: &str) -> Result<LoadedProblem> {
    ProblemFile::from_json(text)?.build()
}

/// `{ "mean": [...], "second_moment": [[...]], "epsilon": ε }`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianFile {
    pub mean: Vec<f64>,
    pub second_moment: Vec<Vec<f64>>,
    pub epsilon: f64,
}

fn square(rows: &[Vec<f64>], n: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Parse(format!("{name}: expected a {n}x{n} matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl GaussianFile {
    pub fn build(&self) -> Result<(GaussianTarget, f64)> {
        let n = self.mean.len();
        if n == 0 || n > MAX_DIM {
            return Err(Error::Parse(format!("mean: dimension {n} not in 1..={MAX_DIM}")));
        }
        let m2 = square(&self.second_moment, n, "second_moment")?;
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Parse(format!("epsilon: must be positive, got {}", self.epsilon)));
        }
        let t = field("second_moment", GaussianTarget::new(DVector::from_column_slice(&self.mean), m2))?;
        Ok((t, self.epsilon))
    }
}

pub fn parse_gaussian(text: &str) -> Result<(GaussianTarget, f64)> {
    from_json::<GaussianFile>(text)?.build()
}

/// Finite-state tracking problem. Give either `kernels` (one matrix per step)
/// or a single `kernel` used at every step; the horizon is `reference.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovFile {
    pub states: Vec<PointSpec>,
    pub nu0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernels: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Vec<Vec<f64>>>,
    pub utility: Vec<f64>,
    pub reference: Vec<f64>,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<PenaltySpec>,
}

impl MarkovFile {
    pub fn build(&self) -> Result<(MarkovProblem, Option<QuadraticPenalty>)> {
        let states = field("states", self.states.iter().map(PointSpec::to_point).collect::<Result<Vec<_>>>())?;
        let s = states.len();
        let m = self.reference.len();
        if s.saturating_mul(s).saturating_mul(m.max(1)) > MAX_CELLS {
            return Err(Error::Parse(format!("kernels: more than {MAX_CELLS} entries")));
        }
        let kernels = match (&self.kernels, &self.kernel) {
            (Some(ks), None) => ks
                .iter()
                .enumerate()
                .map(|(k, rows)| square(rows, s, &format!("kernels[{k}]")))
                .collect::<Result<Vec<_>>>()?,
            (None, Some(rows)) => vec![square(rows, s, "kernel")?; m],
            _ => return Err(Error::Parse("kernels: give exactly one of `kernels` or `kernel`".into())),
        };
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Parse(format!("epsilon: must be positive, got {}", self.epsilon)));
        }
        let penalty = self.penalty.map(|p| field("penalty.kappa", QuadraticPenalty::new(p.kappa))).transpose()?;
        let mp = MarkovProblem::new(states, self.nu0.clone(), kernels, self.utility.clone(), self.reference.clone(), self.epsilon)
            .map_err(|e| Error::Parse(e.to_string()))?;
        Ok((mp, penalty))
    }
}

pub fn parse_markov(text: &str) -> Result<(MarkovProblem, Option<QuadraticPenalty>)> {
    from_json::<MarkovFile>(text)?.build()
}
