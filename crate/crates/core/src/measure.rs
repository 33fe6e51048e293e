//! Finite-support probability measures, cost matrices and couplings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSystem;

/// Tolerance within which user-supplied weights are renormalized rather than rejected.
pub const WEIGHT_RENORM_TOL: f64 = 1e-9;

/// Tolerance on the total mass of a user-supplied coupling.
pub const COUPLING_MASS_TOL: f64 = 1e-12;

/// A point of a finite support in `R^N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if let Some(v) = coords.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("point coordinate {v}")));
        }
        Ok(Point(coords))
    }

    pub fn scalar(x: f64) -> Result<Self> {
        Self::new(vec![x])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl AsRef<[f64]> for Point {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A probability measure with finitely many atoms.
///
/// Weights are validated at construction: they must be finite and nonnegative,
/// and are renormalized when their sum is within [`WEIGHT_RENORM_TOL`] of one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscreteMeasure {
    support: Vec<Point>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(support: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidWeights("empty support".into()));
        }
        if support.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} support points but {} weights",
                support.len(),
                weights.len()
            )));
        }
        let dim = support[0].dim();
        if let Some(p) = support.iter().find(|p| p.dim() != dim) {
            return Err(Error::Dimension(format!(
                "support points of dimension {} and {}",
                dim,
                p.dim()
            )));
        }
        for (k, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidWeights(format!("weight {k} is {w}")));
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_RENORM_TOL {
            return Err(Error::InvalidWeights(format!("weights sum to {total}, not 1")));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(DiscreteMeasure { support, weights })
    }

    /// Uniform weights over `support`.
    pub fn uniform(support: Vec<Point>) -> Result<Self> {
        let n = support.len().max(1);
        Self::new(support, vec![1.0 / n as f64; n])
    }

    /// Scalar atoms with the given weights.
    pub fn from_scalars(xs: &[f64], weights: Vec<f64>) -> Result<Self> {
        let support = xs.iter().map(|&x| Point::scalar(x)).collect::<Result<Vec<_>>>()?;
        Self::new(support, weights)
    }

    pub fn point_mass(p: Point) -> Self {
        DiscreteMeasure { support: vec![p], weights: vec![1.0] }
    }

    pub fn support(&self) -> &[Point] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.support[0].dim()
    }

    /// Index sampled by inverse CDF from a uniform variate `u` in `[0, 1)`.
    pub fn inverse_cdf(&self, u: f64) -> usize {
        inverse_cdf(&self.weights, u)
    }
}

/// First index whose cumulative weight exceeds `u`; falls back to the last
/// index with positive weight when rounding leaves the total below `u`.
pub(crate) fn inverse_cdf(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc && w > 0.0 {
            return j;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Built-in ground costs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cost {
    /// `c(x, y) = ½‖x − y‖²`
    #[serde(rename = "half-squared-euclidean")]
    HalfSquaredEuclidean,
}

impl Cost {
    pub fn eval(&self, x: &Point, y: &Point) -> f64 {
        match self {
            Cost::HalfSquaredEuclidean => half_sq_dist(x.coords(), y.coords()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Cost::HalfSquaredEuclidean => "half-squared-euclidean",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "half-squared-euclidean" => Ok(Cost::HalfSquaredEuclidean),
            other => Err(Error::InvalidArgument(format!("unknown cost '{other}'"))),
        }
    }
}

pub(crate) fn half_sq_dist(x: &[f64], y: &[f64]) -> f64 {
    0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Dense `K1 × K2` cost matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    /// Wraps precomputed entries, checking that they are finite and nonnegative.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "cost data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        for (k, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("cost entry ({}, {})", k / cols, k % cols)));
            }
            if v < 0.0 {
                return Err(Error::NegativeCost { i: k / cols, j: k % cols, value: v });
            }
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Evaluates `cost_fn` on every pair of support points.
pub fn cost_matrix<F>(cost_fn: F, src: &DiscreteMeasure, tgt: &DiscreteMeasure) -> Result<CostMatrix>
where
    F: Fn(&Point, &Point) -> f64,
{
    if src.dim() != tgt.dim() {
        return Err(Error::Dimension(format!(
            "source points have dimension {}, target points {}",
            src.dim(),
            tgt.dim()
        )));
    }
    let mut data = Vec::with_capacity(src.len() * tgt.len());
    for x in src.support() {
        for y in tgt.support() {
            data.push(cost_fn(x, y));
        }
    }
    CostMatrix::from_row_major(src.len(), tgt.len(), data)
}

/// Generalized moments `⟨μ, f_i⟩` for every feature.
pub fn moments(mu: &DiscreteMeasure, feats: &FeatureSystem) -> Result<Vec<f64>> {
    let mut out = vec![0.0; feats.len()];
    for (p, &w) in mu.support().iter().zip(mu.weights()) {
        let v = feats.eval(p)?;
        for (o, fv) in out.iter_mut().zip(&v) {
            *o += w * fv;
        }
    }
    Ok(out)
}

/// A joint probability on `supp μ1 × supp μ2`, stored densely.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    source: Vec<Point>,
    target: Vec<Point>,
    gamma: Vec<f64>,
}

impl Coupling {
    pub fn new(source: Vec<Point>, target: Vec<Point>, gamma: Vec<f64>) -> Result<Self> {
        if gamma.len() != source.len() * target.len() {
            return Err(Error::Dimension(format!(
                "coupling has {} entries for a {}x{} grid",
                gamma.len(),
                source.len(),
                target.len()
            )));
        }
        if let Some(v) = gamma.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidWeights(format!("coupling entry {v}")));
        }
        let total: f64 = gamma.iter().sum();
        if (total - 1.0).abs() > COUPLING_MASS_TOL {
            return Err(Error::InvalidWeights(format!("coupling mass {total}, not 1")));
        }
        Ok(Coupling { source, target, gamma })
    }

    /// Coupling given by an already-normalized dense array; skips the mass check.
    pub(crate) fn from_parts_unchecked(source: Vec<Point>, target: Vec<Point>, gamma: Vec<f64>) -> Self {
        Coupling { source, target, gamma }
    }

    /// Product coupling `μ1 ⊗ μ2`.
    pub fn product(mu1: &DiscreteMeasure, mu2: &DiscreteMeasure) -> Self {
        let mut gamma = Vec::with_capacity(mu1.len() * mu2.len());
        for &a in mu1.weights() {
            for &b in mu2.weights() {
                gamma.push(a * b);
            }
        }
        Coupling { source: mu1.support().to_vec(), target: mu2.support().to_vec(), gamma }
    }

    pub fn rows(&self) -> usize {
        self.source.len()
    }

    pub fn cols(&self) -> usize {
        self.target.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.gamma[i * self.cols() + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.gamma
    }

    /// `⟨γ, c⟩`
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        self.gamma.iter().zip(&cost.data).map(|(g, c)| g * c).sum()
    }
}

/// Relative entropy `D(γ ‖ μ1 ⊗ μ2)` with the convention `0 log 0 = 0`.
pub fn coupling_entropy(gamma: &Coupling, mu1: &DiscreteMeasure, mu2: &DiscreteMeasure) -> Result<f64> {
    if gamma.rows() != mu1.len() || gamma.cols() != mu2.len() {
        return Err(Error::Dimension(format!(
            "coupling is {}x{}, measures have {} and {} atoms",
            gamma.rows(),
            gamma.cols(),
            mu1.len(),
            mu2.len()
        )));
    }
    let mut total = 0.0;
    for (i, &a) in mu1.weights().iter().enumerate() {
        for (j, &b) in mu2.weights().iter().enumerate() {
            let g = gamma.get(i, j);
            if g == 0.0 {
                continue;
            }
            let prod = a * b;
            if prod == 0.0 {
                return Err(Error::InfiniteDivergence { i, j, mass: g });
            }
            total += g * (g / prod).ln();
        }
    }
    // Rounding can leave a tiny negative value for γ ≈ μ1⊗μ2.
    Ok(total.max(0.0))
}

/// Row and column sums of a coupling as measures on the respective supports.
pub fn marginals(gamma: &Coupling) -> Result<(DiscreteMeasure, DiscreteMeasure)> {
    let (k1, k2) = (gamma.rows(), gamma.cols());
    let mut rows = vec![0.0; k1];
    let mut cols = vec![0.0; k2];
    for (i, r) in rows.iter_mut().enumerate() {
        for (j, c) in cols.iter_mut().enumerate() {
            let g = gamma.get(i, j);
            *r += g;
            *c += g;
        }
    }
    Ok((
        DiscreteMeasure::new(gamma.source.clone(), rows)?,
        DiscreteMeasure::new(gamma.target.clone(), cols)?,
    ))
}
