//! Horvitz–Thompson totals and conditional biases of sampled units.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::curves::{population_total, Curve, CurvePopulation, TimeGrid};
use crate::error::{Error, Result};
use crate::sampling::{Design, DesignKind, SampleData, SampleDraw};

/// How the rows of a [`CondBiasMatrix`] were computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMethod {
    /// Literal double sum over sampled pairs with the design's `π_ij`.
    General,
    SrsClosed,
    StrClosed,
}

/// Estimated conditional-bias curves, one row per sampled unit.
#[derive(Clone, Debug, PartialEq)]
pub struct CondBiasMatrix {
    pub rows: Array2<f64>,
    pub grid: Arc<TimeGrid>,
    pub method: BiasMethod,
}

impl CondBiasMatrix {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn row_curve(&self, r: usize) -> Curve {
        Curve::new(self.rows.row(r).to_vec(), self.grid.clone())
            .expect("bias rows are finite and on the grid")
    }
}

/// `Σ_{i∈s} a_i Y_i(t)` with the sample's analysis weights.
pub fn ht_total(data: &SampleData) -> Curve {
    let total = weighted_column_sums(data.values.view(), &data.weights);
    Curve::new(total, data.grid.clone()).expect("finite weighted sums")
}

pub(crate) fn weighted_column_sums(values: ArrayView2<f64>, weights: &[f64]) -> Vec<f64> {
    let mut total = vec![0.0; values.ncols()];
    for (row, w) in values.rows().into_iter().zip(weights) {
        for (t, v) in total.iter_mut().zip(row) {
            *t += w * v;
        }
    }
    total
}

/// True conditional bias `B_1i(t) = Σ_{j∈U} (π_ij / (π_i π_j) - 1) Y_j(t)`.
pub fn conditional_bias_true(pop: &CurvePopulation, design: &Design, i: usize) -> Curve {
    let probs = design.inclusion_probs();
    let pi = probs.first_order(i);
    let mut out = vec![0.0; pop.grid().len()];
    for j in 0..pop.size() {
        let coef = probs.second_order(i, j) / (pi * probs.first_order(j)) - 1.0;
        if coef != 0.0 {
            for (o, y) in out.iter_mut().zip(pop.row(j)) {
                *o += coef * y;
            }
        }
    }
    Curve::new(out, pop.grid().clone()).expect("finite")
}

/// True conditional bias of unit `i` when it is *not* sampled:
/// `B_0i = -B_1i / (d_i - 1)`.
pub fn conditional_bias_nonsampled(pop: &CurvePopulation, design: &Design, i: usize) -> Result<Curve> {
    let d = 1.0 / design.inclusion_probs().first_order(i);
    if d <= 1.0 {
        return Err(Error::CensusUnit(i));
    }
    Ok(conditional_bias_true(pop, design, i).scaled(-1.0 / (d - 1.0)))
}

/// Closed form of the true conditional bias under SRS/STR:
/// `N_h/(N_h-1) (N_h/n_h - 1) (Y_i - Ȳ_{U_h})`.
pub fn conditional_bias_true_closed(pop: &CurvePopulation, design: &Design, i: usize) -> Curve {
    let h = design.stratum_of(i);
    let bign = design.stratum_sizes()[h] as f64;
    let n = design.allocation()[h] as f64;
    let members = design.stratum_members(h);
    let mut mean = vec![0.0; pop.grid().len()];
    for &j in members {
        for (m, y) in mean.iter_mut().zip(pop.row(j)) {
            *m += y;
        }
    }
    let factor = if bign > 1.0 {
        bign / (bign - 1.0) * (bign / n - 1.0)
    } else {
        0.0
    };
    let values = pop
        .row(i)
        .iter()
        .zip(&mean)
        .map(|(y, m)| factor * (y - m / bign))
        .collect();
    Curve::new(values, pop.grid().clone()).expect("finite")
}

/// Estimated conditional biases of the sampled curves.
///
/// Uses the closed form `n_h/(n_h-1) (N_h/n_h - 1) (Y_i - Ȳ_{s_h})`, which
/// equals the general double sum for SRS and STR.
pub fn conditional_bias_estimated(data: &SampleData) -> Result<CondBiasMatrix> {
    let rows = conditional_biases_of(data.values.view(), data)?;
    let method = if data.strata.len() == 1 {
        BiasMethod::SrsClosed
    } else {
        BiasMethod::StrClosed
    };
    Ok(CondBiasMatrix {
        rows,
        grid: data.grid.clone(),
        method,
    })
}

/// Conditional biases of the HT totals of arbitrary per-unit variables.
///
/// `values` has one row per sampled unit (aligned with `data`) and one column
/// per variable: grid points, principal scores or wavelet coefficients all go
/// through here. The stratum centre is `Σ_{j∈s_h} a_j x_j / N_h` with the
/// analysis weights `a_j`, which is the sample mean when `a_j = N_h / n_h`;
/// the factor keeps the design weight, as only means are re-weighted.
pub fn conditional_biases_of(values: ArrayView2<f64>, data: &SampleData) -> Result<Array2<f64>> {
    let (n, m) = values.dim();
    if n != data.len() {
        return Err(Error::Dimension(format!(
            "{n} rows of variables for a sample of {}",
            data.len()
        )));
    }
    let mut out = Array2::zeros((n, m));
    let mut centre = vec![0.0; m];
    for (h, sizes) in data.strata.iter().enumerate() {
        let rows = data.rows_in(h);
        if rows.is_empty() {
            continue;
        }
        if sizes.sample < 2 {
            return Err(Error::DegenerateStratum {
                stratum: h + 1,
                size: sizes.sample,
            });
        }
        let nh = sizes.sample as f64;
        let factor = nh / (nh - 1.0) * (sizes.design_weight() - 1.0);
        let inv_pop = 1.0 / sizes.population as f64;
        centre.iter_mut().for_each(|c| *c = 0.0);
        for &r in rows {
            let a = data.weights[r] * inv_pop;
            for (c, x) in centre.iter_mut().zip(values.row(r)) {
                *c += a * x;
            }
        }
        for &r in rows {
            for ((o, x), c) in out.row_mut(r).iter_mut().zip(values.row(r)).zip(&centre) {
                *o = factor * (x - c);
            }
        }
    }
    Ok(out)
}

/// Literal estimator `B̂_1i(t) = Σ_{j∈s} (π_ij - π_i π_j)/(π_j π_ij) Y_j(t)`,
/// `O(n² D)`.
pub fn conditional_bias_general(pop: &CurvePopulation, draw: &SampleDraw) -> CondBiasMatrix {
    let probs = draw.design.inclusion_probs();
    let d = pop.grid().len();
    let mut rows = Array2::zeros((draw.len(), d));
    for (r, &i) in draw.units.iter().enumerate() {
        let pi = probs.first_order(i);
        let mut row = rows.row_mut(r);
        for &j in &draw.units {
            let pij = probs.second_order(i, j);
            let pj = probs.first_order(j);
            let coef = (pij - pi * pj) / (pj * pij);
            if coef != 0.0 {
                for (o, y) in row.iter_mut().zip(pop.row(j)) {
                    *o += coef * y;
                }
            }
        }
    }
    CondBiasMatrix {
        rows,
        grid: pop.grid().clone(),
        method: BiasMethod::General,
    }
}

/// Remainder variables `A_i(t) = -1/(1-π_i) Σ_{j≠i} (π_ij - π_i π_j)/π_j Y_j(t)`
/// for every population unit (`N × D`, literal double sum). Units selected
/// with certainty get `A_i = 0`.
pub fn remainder_terms(pop: &CurvePopulation, design: &Design) -> Array2<f64> {
    let probs = design.inclusion_probs();
    let n = pop.size();
    let mut out = Array2::zeros((n, pop.grid().len()));
    for i in 0..n {
        let pi = probs.first_order(i);
        if pi >= 1.0 {
            continue;
        }
        let mut row = out.row_mut(i);
        for j in (0..n).filter(|&j| j != i) {
            let pj = probs.first_order(j);
            let coef = -(probs.second_order(i, j) - pi * pj) / (pj * (1.0 - pi));
            if coef != 0.0 {
                for (o, y) in row.iter_mut().zip(pop.row(j)) {
                    *o += coef * y;
                }
            }
        }
    }
    out
}

/// Both sides of the SRS identity
/// `Σ_{i∈s} d_i A_i(t) - Σ_{i∈U} A_i(t) = (t_Y(t) - t̂_Y(t)) / (N - 1)`.
pub fn remainder_identity_check(pop: &CurvePopulation, draw: &SampleDraw) -> Result<(Curve, Curve)> {
    if draw.design.kind() != DesignKind::Srs {
        return Err(Error::UnsupportedDesign(
            "the remainder identity holds for SRS only".into(),
        ));
    }
    let grid = pop.grid().clone();
    let n_pop = pop.size();
    if draw.design.is_census() {
        return Ok((Curve::zeros(grid.clone()), Curve::zeros(grid)));
    }
    let a = remainder_terms(pop, &draw.design);
    let mut lhs = vec![0.0; grid.len()];
    for (&i, &d) in draw.units.iter().zip(&draw.weights) {
        for (l, v) in lhs.iter_mut().zip(a.row(i)) {
            *l += d * v;
        }
    }
    for row in a.rows() {
        for (l, v) in lhs.iter_mut().zip(row) {
            *l -= v;
        }
    }
    let total = population_total(pop);
    let data = SampleData::new(pop, draw)?;
    let ht = ht_total(&data);
    let rhs = total
        .values()
        .iter()
        .zip(ht.values())
        .map(|(t, e)| (t - e) / (n_pop as f64 - 1.0))
        .collect();
    Ok((Curve::new(lhs, grid.clone())?, Curve::new(rhs, grid)?))
}
