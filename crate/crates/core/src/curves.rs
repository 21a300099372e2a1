//! Discretized curves on a common time grid.
//!
//! Every curve in a population is observed at the same `D` instants. Inner
//! products and norms are quadrature approximations of the `L²` ones; the
//! quadrature rule is carried by the [`TimeGrid`].

use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quadrature rule backing inner products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrature {
    /// Trapezoid weights, summing to `t_D - t_1`.
    #[default]
    Trapezoid,
    /// Every point weighs 1, so `<a, b>` is the plain dot product.
    Unit,
}

impl std::str::FromStr for Quadrature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trapezoid" => Ok(Quadrature::Trapezoid),
            "unit" => Ok(Quadrature::Unit),
            other => Err(Error::Config(format!("unknown quadrature {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
    quadrature: Quadrature,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>, quadrature: Quadrature) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidGrid("non-finite time point".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("points must be strictly increasing".into()));
        }
        let d = points.len();
        let weights = match quadrature {
            Quadrature::Unit => vec![1.0; d],
            Quadrature::Trapezoid => (0..d)
                .map(|k| {
                    let left = if k > 0 { points[k] - points[k - 1] } else { 0.0 };
                    let right = if k + 1 < d { points[k + 1] - points[k] } else { 0.0 };
                    0.5 * (left + right)
                })
                .collect(),
        };
        Ok(TimeGrid {
            points,
            weights,
            quadrature,
        })
    }

    /// Grid `1, 2, ..., d`.
    pub fn uniform(d: usize, quadrature: Quadrature) -> Result<Self> {
        Self::new((1..=d).map(|k| k as f64).collect(), quadrature)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn quadrature(&self) -> Quadrature {
        self.quadrature
    }

    /// Quadrature inner product of two value slices of length `D`.
    #[inline]
    pub fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), self.len());
        debug_assert_eq!(b.len(), self.len());
        match self.quadrature {
            Quadrature::Unit => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Quadrature::Trapezoid => self
                .weights
                .iter()
                .zip(a.iter().zip(b))
                .map(|(w, (x, y))| w * x * y)
                .sum(),
        }
    }

    /// Same as [`TimeGrid::dot`] on ndarray views.
    #[inline]
    pub fn dot_view(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        match (a.as_slice(), b.as_slice()) {
            (Some(a), Some(b)) => self.dot(a, b),
            _ => a
                .iter()
                .zip(b.iter())
                .zip(&self.weights)
                .map(|((x, y), w)| w * x * y)
                .sum(),
        }
    }

    #[inline]
    pub fn norm(&self, a: &[f64]) -> f64 {
        self.dot(a, a).sqrt()
    }
}

/// A curve observed on a [`TimeGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    values: Vec<f64>,
    grid: Arc<TimeGrid>,
}

impl Curve {
    pub fn new(values: Vec<f64>, grid: Arc<TimeGrid>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidCurve(format!(
                "{} values on a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidCurve(format!("non-finite value at index {pos}")));
        }
        Ok(Curve { values, grid })
    }

    pub fn zeros(grid: Arc<TimeGrid>) -> Self {
        Curve {
            values: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn constant(value: f64, grid: Arc<TimeGrid>) -> Self {
        Curve {
            values: vec![value; grid.len()],
            grid,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Curve {
        Curve {
            values: self.values.iter().map(|v| v * factor).collect(),
            grid: self.grid.clone(),
        }
    }
}

fn same_grid(a: &Curve, b: &Curve) -> bool {
    Arc::ptr_eq(&a.grid, &b.grid) || a.grid == b.grid
}

pub fn inner_product(a: &Curve, b: &Curve) -> Result<f64> {
    if !same_grid(a, b) {
        return Err(Error::GridMismatch);
    }
    Ok(a.grid.dot(&a.values, &b.values))
}

pub fn l2_norm(a: &Curve) -> f64 {
    a.grid.norm(&a.values)
}

/// `N` curves on one grid, with optional stratum labels `1..=H` and
/// auxiliary scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePopulation {
    grid: Arc<TimeGrid>,
    values: Array2<f64>,
    strata: Option<Vec<usize>>,
    auxiliary: Option<Vec<f64>>,
}

impl CurvePopulation {
    /// `values` is `N × D`, one row per unit.
    pub fn new(
        grid: Arc<TimeGrid>,
        values: Array2<f64>,
        strata: Option<Vec<usize>>,
        auxiliary: Option<Vec<f64>>,
    ) -> Result<Self> {
        let (n, d) = values.dim();
        if n == 0 {
            return Err(Error::InvalidPopulation("population is empty".into()));
        }
        if d != grid.len() {
            return Err(Error::InvalidPopulation(format!(
                "rows have {d} values but the grid has {} points",
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPopulation("non-finite curve value".into()));
        }
        if let Some(labels) = &strata {
            check_labels(labels, n)?;
        }
        if let Some(aux) = &auxiliary {
            if aux.len() != n {
                return Err(Error::InvalidPopulation(format!(
                    "{} auxiliary values for {n} units",
                    aux.len()
                )));
            }
            if aux.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidPopulation("non-finite auxiliary value".into()));
            }
        }
        Ok(CurvePopulation {
            grid,
            values,
            strata,
            auxiliary,
        })
    }

    pub fn from_curves(curves: &[Curve]) -> Result<Self> {
        let first = curves.first().ok_or(Error::EmptySubset)?;
        let d = first.len();
        let mut values = Array2::zeros((curves.len(), d));
        for (i, c) in curves.iter().enumerate() {
            if !same_grid(first, c) {
                return Err(Error::GridMismatch);
            }
            values.row_mut(i).assign(&ArrayView1::from(c.values()));
        }
        Self::new(first.grid.clone(), values, None, None)
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn curve(&self, i: usize) -> Curve {
        Curve {
            values: self.values.row(i).to_vec(),
            grid: self.grid.clone(),
        }
    }

    pub fn strata(&self) -> Option<&[usize]> {
        self.strata.as_deref()
    }

    pub fn auxiliary(&self) -> Option<&[f64]> {
        self.auxiliary.as_deref()
    }

    /// Number of strata `H`, or 1 for an unstratified population.
    pub fn stratum_count(&self) -> usize {
        self.strata
            .as_ref()
            .map_or(1, |s| s.iter().copied().max().unwrap_or(1))
    }

    /// `N_h` for `h = 1..=H` (index `h - 1`).
    pub fn stratum_sizes(&self) -> Vec<usize> {
        match &self.strata {
            None => vec![self.size()],
            Some(labels) => {
                let mut sizes = vec![0; self.stratum_count()];
                for &l in labels {
                    sizes[l - 1] += 1;
                }
                sizes
            }
        }
    }

    pub fn with_strata(mut self, strata: Vec<usize>) -> Result<Self> {
        check_labels(&strata, self.size())?;
        self.strata = Some(strata);
        Ok(self)
    }

    pub fn with_auxiliary(mut self, aux: Vec<f64>) -> Result<Self> {
        if aux.len() != self.size() {
            return Err(Error::InvalidPopulation("auxiliary length mismatch".into()));
        }
        self.auxiliary = Some(aux);
        Ok(self)
    }
}

fn check_labels(labels: &[usize], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::InvalidPopulation(format!(
            "{} stratum labels for {n} units",
            labels.len()
        )));
    }
    if labels.contains(&0) {
        return Err(Error::InvalidPopulation("stratum labels start at 1".into()));
    }
    let h = labels.iter().copied().max().unwrap_or(0);
    let mut seen = vec![false; h];
    for &l in labels {
        seen[l - 1] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidPopulation(format!(
            "stratum {} has no units",
            missing + 1
        )));
    }
    Ok(())
}

pub fn population_total(pop: &CurvePopulation) -> Curve {
    let mut total = vec![0.0; pop.grid.len()];
    for row in pop.values.rows() {
        for (t, v) in total.iter_mut().zip(row) {
            *t += v;
        }
    }
    Curve {
        values: total,
        grid: pop.grid.clone(),
    }
}

/// Pointwise mean over `subset` (the whole population when `None`).
pub fn population_mean(pop: &CurvePopulation, subset: Option<&[usize]>) -> Result<Curve> {
    let mut mean = vec![0.0; pop.grid.len()];
    let count = match subset {
        None => {
            for row in pop.values.rows() {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            pop.size()
        }
        Some(units) => {
            if units.is_empty() {
                return Err(Error::EmptySubset);
            }
            for &i in units {
                if i >= pop.size() {
                    return Err(Error::InvalidPopulation(format!("unit {i} out of range")));
                }
                for (m, v) in mean.iter_mut().zip(pop.values.row(i)) {
                    *m += v;
                }
            }
            units.len()
        }
    };
    let inv = 1.0 / count as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(Curve {
        values: mean,
        grid: pop.grid.clone(),
    })
}
