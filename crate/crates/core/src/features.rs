//! Feature functions `f: R^N → R^M` with their moment targets `r`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::measure::Point;

type FeatureFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// One contiguous group of features.
#[derive(Clone)]
pub enum FeatureBlock {
    /// `y ↦ (y_1, …, y_n)`
    Linear { dim: usize },
    /// `y ↦ (y_i y_j)_{i ≤ j}` in row-major upper-triangular order.
    QuadraticMonomials { dim: usize },
    /// One indicator per bin `[edges[k], edges[k+1])` of coordinate `axis`.
    IndicatorGrid { axis: usize, edges: Vec<f64> },
    /// Values listed per point; evaluation looks the point up by exact coordinates.
    Tabulated { points: Vec<Point>, values: Vec<Vec<f64>>, width: usize },
    /// Arbitrary user function returning `width` values.
    Custom { width: usize, f: FeatureFn },
}

impl fmt::Debug for FeatureBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureBlock::Linear { dim } => write!(f, "Linear({dim})"),
            FeatureBlock::QuadraticMonomials { dim } => write!(f, "QuadraticMonomials({dim})"),
            FeatureBlock::IndicatorGrid { axis, edges } => {
                write!(f, "IndicatorGrid(axis={axis}, bins={})", edges.len().saturating_sub(1))
            }
            FeatureBlock::Tabulated { points, width, .. } => {
                write!(f, "Tabulated({} points, width {width})", points.len())
            }
            FeatureBlock::Custom { width, .. } => write!(f, "Custom(width {width})"),
        }
    }
}

impl FeatureBlock {
    pub fn width(&self) -> usize {
        match self {
            FeatureBlock::Linear { dim } => *dim,
            FeatureBlock::QuadraticMonomials { dim } => dim * (dim + 1) / 2,
            FeatureBlock::IndicatorGrid { edges, .. } => edges.len().saturating_sub(1),
            FeatureBlock::Tabulated { width, .. } => *width,
            FeatureBlock::Custom { width, .. } => *width,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            FeatureBlock::IndicatorGrid { edges, .. } => {
                if edges.len() < 2 {
                    return Err(Error::InvalidArgument("indicator grid needs at least two edges".into()));
                }
                if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidArgument("indicator grid edges must be finite and increasing".into()));
                }
            }
            FeatureBlock::Tabulated { points, values, width } => {
                if points.len() != values.len() {
                    return Err(Error::Dimension(format!(
                        "tabulated features: {} points but {} value rows",
                        points.len(),
                        values.len()
                    )));
                }
                if let Some(row) = values.iter().find(|r| r.len() != *width) {
                    return Err(Error::Dimension(format!(
                        "tabulated feature row of length {}, expected {width}",
                        row.len()
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn eval_into(&self, y: &[f64], out: &mut Vec<f64>) -> Result<()> {
        match self {
            FeatureBlock::Linear { dim } => {
                check_dim(*dim, y)?;
                out.extend_from_slice(y);
            }
            FeatureBlock::QuadraticMonomials { dim } => {
                check_dim(*dim, y)?;
                for i in 0..*dim {
                    for j in i..*dim {
                        out.push(y[i] * y[j]);
                    }
                }
            }
            FeatureBlock::IndicatorGrid { axis, edges } => {
                let v = *y.get(*axis).ok_or_else(|| {
                    Error::Dimension(format!("indicator grid axis {axis} on a point of dimension {}", y.len()))
                })?;
                for w in edges.windows(2) {
                    out.push(if v >= w[0] && v < w[1] { 1.0 } else { 0.0 });
                }
            }
            FeatureBlock::Tabulated { points, values, .. } => {
                let k = points
                    .iter()
                    .position(|p| p.coords() == y)
                    .ok_or_else(|| Error::InvalidArgument(format!("no tabulated feature value for point {y:?}")))?;
                out.extend_from_slice(&values[k]);
            }
            FeatureBlock::Custom { width, f } => {
                let v = f(y);
                if v.len() != *width {
                    return Err(Error::Dimension(format!(
                        "custom feature returned {} values, expected {width}",
                        v.len()
                    )));
                }
                out.extend(v);
            }
        }
        Ok(())
    }
}

fn check_dim(dim: usize, y: &[f64]) -> Result<()> {
    if y.len() != dim {
        return Err(Error::Dimension(format!("feature expects dimension {dim}, point has {}", y.len())));
    }
    Ok(())
}

/// Feature blocks concatenated into a vector of length `M`, with targets `r`.
#[derive(Clone, Debug)]
pub struct FeatureSystem {
    blocks: Vec<FeatureBlock>,
    targets: Vec<f64>,
}

impl FeatureSystem {
    pub fn new(blocks: Vec<FeatureBlock>, targets: Vec<f64>) -> Result<Self> {
        for b in &blocks {
            b.validate()?;
        }
        let m: usize = blocks.iter().map(FeatureBlock::width).sum();
        if m == 0 {
            return Err(Error::InvalidArgument("feature system has no features".into()));
        }
        if m != targets.len() {
            return Err(Error::Dimension(format!("{m} features but {} targets", targets.len())));
        }
        if let Some(r) = targets.iter().find(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("target {r}")));
        }
        Ok(FeatureSystem { blocks, targets })
    }

    /// `f(y) = y`. Panics if `targets.len() != dim`.
    pub fn linear(dim: usize, targets: Vec<f64>) -> Self {
        Self::new(vec![FeatureBlock::Linear { dim }], targets).expect("linear feature targets")
    }

    /// `f(y) = (y_i y_j)_{i≤j}`. Panics on a target-length mismatch.
    pub fn quadratic_monomials(dim: usize, targets: Vec<f64>) -> Self {
        Self::new(vec![FeatureBlock::QuadraticMonomials { dim }], targets).expect("quadratic feature targets")
    }

    /// Linear followed by quadratic monomials: all first and second moments.
    pub fn first_and_second_moments(dim: usize, targets: Vec<f64>) -> Result<Self> {
        Self::new(
            vec![FeatureBlock::Linear { dim }, FeatureBlock::QuadraticMonomials { dim }],
            targets,
        )
    }

    pub fn custom<F>(width: usize, targets: Vec<f64>, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self::new(vec![FeatureBlock::Custom { width, f: Arc::new(f) }], targets)
    }

    /// Number of features `M`.
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn blocks(&self) -> &[FeatureBlock] {
        &self.blocks
    }

    /// Copy with new targets of the same length.
    pub fn with_targets(&self, targets: Vec<f64>) -> Result<Self> {
        Self::new(self.blocks.clone(), targets)
    }

    /// `f(p)`; errors on dimension problems or non-finite output.
    pub fn eval(&self, p: &Point) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.len());
        for b in &self.blocks {
            b.eval_into(p.coords(), &mut out)?;
        }
        if let Some(v) = out.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {v} at {:?}", p.coords())));
        }
        Ok(out)
    }

    /// Residual `f̃(p) = f(p) − r`.
    pub fn residual(&self, p: &Point) -> Result<Vec<f64>> {
        let mut v = self.eval(p)?;
        for (x, r) in v.iter_mut().zip(&self.targets) {
            *x -= r;
        }
        Ok(v)
    }
}
