//! Robust estimator built on spherical principal components: a weighted
//! geometric median, the sphericised covariance, and Huber-robustified
//! principal-score totals.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::curves::{Curve, TimeGrid};
use crate::error::{Error, Result};
use crate::ht_estimator::{conditional_biases_of, weighted_column_sums};
use crate::robust_pointwise::{tune_columns, EstimatorKind, RobustTotalEstimate, Tuning};
use crate::sampling::SampleData;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpcaConfig {
    /// Number of retained components.
    pub k: usize,
    /// Weiszfeld stops once the estimating-equation norm is below
    /// `tol * Σ d_i`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SpcaConfig {
    fn default() -> Self {
        SpcaConfig {
            k: 5,
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometricMedian {
    pub curve: Curve,
    pub iterations: usize,
    /// `‖Σ d_i (Y_i - m) / ‖Y_i - m‖‖` at the returned point, colliding
    /// curves excluded.
    pub residual: f64,
    /// `Σ d_i ‖Y_i - m‖` after each iteration, starting with the initial point.
    pub objective_trace: Vec<f64>,
}

/// Weighted geometric median `argmin_m Σ d_i ‖Y_i - m‖` by Weiszfeld's
/// iteration from the weighted mean.
///
/// When the iterate lands on data curves, their terms are dropped and the
/// step is damped so the point only moves if the remaining pull exceeds the
/// colliding weight; if it does not, the iterate is the median.
pub fn geometric_median(
    grid: &Arc<TimeGrid>,
    curves: ArrayView2<f64>,
    weights: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<GeometricMedian> {
    let (n, d) = curves.dim();
    if n == 0 {
        return Err(Error::EmptySample);
    }
    if d != grid.len() || weights.len() != n {
        return Err(Error::Dimension("median inputs disagree in size".into()));
    }
    let owned = curves.as_standard_layout();
    let curves = owned.view();
    let total: f64 = weights.iter().sum();
    let mut m: Vec<f64> = weighted_column_sums(curves, weights)
        .into_iter()
        .map(|v| v / total)
        .collect();
    let objective = |m: &[f64]| -> f64 {
        curves
            .rows()
            .into_iter()
            .zip(weights)
            .map(|(row, w)| w * distance(grid, row.as_slice().unwrap(), m))
            .sum()
    };
    let scale = curves
        .rows()
        .into_iter()
        .map(|row| grid.norm(row.as_slice().unwrap()))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut trace = vec![objective(&m)];
    let mut pull = vec![0.0; d];
    let mut next = vec![0.0; d];
    for iter in 0..=max_iter {
        pull.iter_mut().for_each(|p| *p = 0.0);
        next.iter_mut().for_each(|p| *p = 0.0);
        let mut inv_sum = 0.0;
        let mut colliding = 0.0;
        for (row, &w) in curves.rows().into_iter().zip(weights) {
            let y = row.as_slice().unwrap();
            let dist = distance(grid, y, &m);
            if dist <= 1e-14 * scale {
                colliding += w;
                continue;
            }
            let a = w / dist;
            inv_sum += a;
            for ((p, nx), (yv, mv)) in pull.iter_mut().zip(next.iter_mut()).zip(y.iter().zip(&m)) {
                *p += a * (yv - mv);
                *nx += a * yv;
            }
        }
        let residual = grid.norm(&pull);
        if residual <= tol * total || (colliding > 0.0 && residual <= colliding) || inv_sum == 0.0 {
            return Ok(GeometricMedian {
                curve: Curve::new(m, grid.clone())?,
                iterations: iter,
                residual,
                objective_trace: trace,
            });
        }
        if iter == max_iter {
            return Err(Error::ConvergenceFailure {
                iterations: iter,
                residual,
                last: m,
            });
        }
        let damp = if colliding > 0.0 {
            (1.0 - colliding / residual).max(0.0)
        } else {
            1.0
        };
        for (mv, nx) in m.iter_mut().zip(&next) {
            *mv = damp * (nx / inv_sum) + (1.0 - damp) * *mv;
        }
        trace.push(objective(&m));
    }
    unreachable!()
}

fn distance(grid: &TimeGrid, a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    grid.norm(&diff)
}

/// `Γ̂(r, t) = (1/N) Σ d_i u_i(r) u_i(t)` with `u_i = (Y_i - m) / ‖Y_i - m‖`.
///
/// Returns the kernel and the number of curves skipped because they
/// coincide with the median.
pub fn spherical_covariance(
    grid: &TimeGrid,
    curves: ArrayView2<f64>,
    weights: &[f64],
    median: &[f64],
    population_size: usize,
) -> (Array2<f64>, usize) {
    let d = grid.len();
    let mut kernel = Array2::zeros((d, d));
    let mut skipped = 0;
    let inv_n = 1.0 / population_size as f64;
    for (row, &w) in curves.rows().into_iter().zip(weights) {
        let u: Vec<f64> = row.iter().zip(median).map(|(y, m)| y - m).collect();
        let norm2 = grid.dot(&u, &u);
        if norm2 <= 0.0 {
            skipped += 1;
            continue;
        }
        let a = w * inv_n / norm2;
        for r in 0..d {
            let ar = a * u[r];
            for t in r..d {
                kernel[[r, t]] += ar * u[t];
            }
        }
    }
    for r in 0..d {
        for t in 0..r {
            kernel[[r, t]] = kernel[[t, r]];
        }
    }
    (kernel, skipped)
}

/// Top-`k` eigenpairs of the integral operator `f ↦ ∫ Γ(·, t) f(t) dt` under
/// the grid's quadrature, with eigenfunctions of unit norm whose first
/// non-negligible coordinate is positive.
pub fn eigendecompose(grid: &Arc<TimeGrid>, kernel: &Array2<f64>, k: usize) -> Result<(Vec<f64>, Vec<Curve>)> {
    let d = grid.len();
    if kernel.dim() != (d, d) {
        return Err(Error::Dimension(format!("kernel is {:?}, grid has {d} points", kernel.dim())));
    }
    if k > d {
        return Err(Error::Dimension(format!("{k} components requested from {d} grid points")));
    }
    let root: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
    let sym = DMatrix::from_fn(d, d, |r, t| root[r] * kernel[[r, t]] * root[t]);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut values = Vec::with_capacity(k);
    let mut functions = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let col = eig.eigenvectors.column(j);
        let mut v: Vec<f64> = col.iter().zip(&root).map(|(g, r)| g / r).collect();
        let norm = grid.norm(&v);
        let peak = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let sign = v
            .iter()
            .find(|x| x.abs() > 1e-10 * peak)
            .map_or(1.0, |x| x.signum());
        v.iter_mut().for_each(|x| *x *= sign / norm);
        values.push(eig.eigenvalues[j]);
        functions.push(Curve::new(v, grid.clone())?);
    }
    Ok((values, functions))
}

/// Spherical principal components fitted on a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SphericalPca {
    pub median: GeometricMedian,
    pub eigenvalues: Vec<f64>,
    pub eigenfunctions: Vec<Curve>,
    /// Sampled curves skipped in the covariance because they equal the median.
    pub skipped: usize,
}

impl SphericalPca {
    pub fn fit(data: &SampleData, config: &SpcaConfig) -> Result<Self> {
        if config.k > data.len() {
            return Err(Error::Dimension(format!(
                "{} components requested from {} sampled curves",
                config.k,
                data.len()
            )));
        }
        let values = data.values.as_standard_layout();
        let median = geometric_median(&data.grid, values.view(), &data.weights, config.tol, config.max_iter)?;
        let (kernel, skipped) = spherical_covariance(
            &data.grid,
            values.view(),
            &data.weights,
            median.curve.values(),
            data.population_size,
        );
        let (eigenvalues, eigenfunctions) = eigendecompose(&data.grid, &kernel, config.k)?;
        Ok(SphericalPca {
            median,
            eigenvalues,
            eigenfunctions,
            skipped,
        })
    }

    pub fn k(&self) -> usize {
        self.eigenfunctions.len()
    }

    /// `n × K` matrix of scores `⟨Y_i - m̂, v̂_k⟩`.
    pub fn scores(&self, data: &SampleData) -> Array2<f64> {
        let m = self.median.curve.values();
        let mut out = Array2::zeros((data.len(), self.k()));
        for (r, row) in data.values.rows().into_iter().enumerate() {
            let centred: Vec<f64> = row.iter().zip(m).map(|(y, m)| y - m).collect();
            for (k, v) in self.eigenfunctions.iter().enumerate() {
                out[[r, k]] = data.grid.dot(&centred, v.values());
            }
        }
        out
    }
}

/// Scores, their totals and robustified totals.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub scores: Array2<f64>,
    pub totals: Vec<f64>,
    pub robust_totals: Vec<f64>,
    /// Conditional biases of the score totals, `n × K`.
    pub biases: Array2<f64>,
    pub constants: Vec<f64>,
}

impl ScoreSet {
    /// With `tuning = None` the totals are left untruncated.
    pub fn compute(pca: &SphericalPca, data: &SampleData, tuning: Option<Tuning>) -> Result<Self> {
        let scores = pca.scores(data);
        let totals = weighted_column_sums(scores.view(), &data.weights);
        let biases = conditional_biases_of(scores.view(), data)?;
        let (constants, deltas) = match tuning {
            Some(t) if pca.k() > 0 => tune_columns(biases.view(), t)?,
            _ => {
                let top: Vec<f64> = biases
                    .columns()
                    .into_iter()
                    .map(|c| c.iter().fold(0.0_f64, |m, b| m.max(b.abs())))
                    .collect();
                (top, vec![0.0; pca.k()])
            }
        };
        let robust_totals = totals.iter().zip(&deltas).map(|(f, d)| f + d).collect();
        Ok(ScoreSet {
            scores,
            totals,
            robust_totals,
            biases,
            constants,
        })
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.robust_totals
            .iter()
            .zip(&self.totals)
            .map(|(r, t)| r - t)
            .collect()
    }
}

/// `t̂^{R2}(t) = N m̂(t) + Σ_k F̂^R_k v̂_k(t)`.
pub fn r2_from_fit(pca: &SphericalPca, scores: &ScoreSet, population_size: usize, tuning: Tuning) -> Result<RobustTotalEstimate> {
    let bign = population_size as f64;
    let mut values: Vec<f64> = pca.median.curve.values().iter().map(|m| bign * m).collect();
    for (f, v) in scores.robust_totals.iter().zip(&pca.eigenfunctions) {
        for (o, x) in values.iter_mut().zip(v.values()) {
            *o += f * x;
        }
    }
    Ok(RobustTotalEstimate {
        curve: Curve::new(values, pca.median.curve.grid().clone())?,
        kind: EstimatorKind::R2,
        tuning,
        constants: scores.constants.clone(),
        delta: scores.deltas(),
    })
}

/// Fits the components and returns the robust total. `tuning = None` gives
/// the non-robust substitution estimator.
pub fn r2_estimate(data: &SampleData, config: &SpcaConfig, tuning: Option<Tuning>) -> Result<RobustTotalEstimate> {
    let pca = SphericalPca::fit(data, config)?;
    let scores = ScoreSet::compute(&pca, data, tuning)?;
    r2_from_fit(&pca, &scores, data.population_size, tuning.unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::{population_total, CurvePopulation, Quadrature};
    use crate::ht_estimator::ht_total;
    use crate::robust_pointwise::minimax_delta;
    use crate::sampling::Design;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid(d: usize, q: Quadrature) -> Arc<TimeGrid> {
        Arc::new(TimeGrid::uniform(d, q).unwrap())
    }

    fn residual_at(grid: &TimeGrid, curves: ArrayView2<f64>, weights: &[f64], m: &[f64]) -> f64 {
        let mut pull = vec![0.0; m.len()];
        for (row, w) in curves.rows().into_iter().zip(weights) {
            let y = row.to_vec();
            let dist = distance(grid, &y, m);
            if dist > 0.0 {
                for (p, (a, b)) in pull.iter_mut().zip(y.iter().zip(m)) {
                    *p += w * (a - b) / dist;
                }
            }
        }
        grid.norm(&pull)
    }

    #[test]
    fn median_of_two_is_midpoint() {
        let g = grid(3, Quadrature::Trapezoid);
        let y = array![[1.0, 2.0, 3.0], [3.0, 0.0, 7.0]];
        let med = geometric_median(&g, y.view(), &[1.0, 1.0], 1e-10, 500).unwrap();
        assert_eq!(med.curve.values(), &[2.0, 1.0, 5.0]);
        assert!(residual_at(&g, y.view(), &[1.0, 1.0], med.curve.values()) < 1e-12);
    }

    #[test]
    fn symmetric_cross_has_zero_median() {
        let g = grid(2, Quadrature::Unit);
        let y = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let med = geometric_median(&g, y.view(), &[1.0; 4], 1e-10, 500).unwrap();
        assert!(med.curve.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dominant_weight_pulls_median_onto_curve() {
        let g = grid(3, Quadrature::Unit);
        let y = array![[5.0, 5.0, 5.0], [0.0, 1.0, 0.0], [1.0, 0.0, 2.0], [-1.0, 2.0, 0.0]];
        let w = [1e6, 1.0, 1.0, 1.0];
        let med = geometric_median(&g, y.view(), &w, 1e-8, 500).unwrap();
        for v in med.curve.values() {
            assert!((v - 5.0).abs() < 1e-6);
        }
        // the median is exactly the heavy curve once it gets there
        assert!(med.residual <= 1e6);
    }

    #[test]
    fn median_gives_up_after_max_iter() {
        let g = grid(2, Quadrature::Unit);
        let y = array![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [3.0, 7.0], [9.0, 1.0]];
        let err = geometric_median(&g, y.view(), &[1.0; 5], 1e-15, 1).unwrap_err();
        assert!(matches!(err, Error::ConvergenceFailure { iterations: 1, .. }));
    }

    #[test]
    fn covariance_traces() {
        let g = grid(4, Quadrature::Trapezoid);
        let mut rng = crate::rng::rng(4);
        let y = Array2::from_shape_fn((6, 4), |_| rng.random_range(-3.0..3.0));
        let w = vec![1.0; 6];
        let med = geometric_median(&g, y.view(), &w, 1e-10, 1000).unwrap();
        let (k, skipped) = spherical_covariance(&g, y.view(), &w, med.curve.values(), 6);
        assert_eq!(skipped, 0);
        let trace: f64 = (0..4).map(|t| k[[t, t]] * g.weights()[t]).sum();
        assert!((trace - 1.0).abs() < 1e-12);

        let dw = vec![2.0, 3.0, 1.5, 4.0, 2.5, 3.0];
        let (k, _) = spherical_covariance(&g, y.view(), &dw, med.curve.values(), 20);
        let trace: f64 = (0..4).map(|t| k[[t, t]] * g.weights()[t]).sum();
        assert!((trace - dw.iter().sum::<f64>() / 20.0).abs() < 1e-12);

        let single = array![[3.0, 4.0, 0.0, 0.0]];
        let gu = grid(4, Quadrature::Unit);
        let (k, _) = spherical_covariance(&gu, single.view(), &[1.0], &[0.0; 4], 1);
        let u = [0.6, 0.8, 0.0, 0.0];
        for r in 0..4 {
            for t in 0..4 {
                assert!((k[[r, t]] - u[r] * u[t]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn eigen_examples() {
        let g = grid(2, Quadrature::Unit);
        let (vals, fns) = eigendecompose(&g, &array![[2.0, 0.0], [0.0, 1.0]], 2).unwrap();
        assert_eq!(vals, vec![2.0, 1.0]);
        assert_eq!(fns[0].values(), &[1.0, 0.0]);

        let g3 = grid(3, Quadrature::Unit);
        let u = [0.0, -0.6, 0.8];
        let kernel = Array2::from_shape_fn((3, 3), |(r, t)| u[r] * u[t]);
        let (vals, fns) = eigendecompose(&g3, &kernel, 2).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12 && vals[1].abs() < 1e-12);
        for (a, b) in fns[0].values().iter().zip(&u) {
            assert!((a + b).abs() < 1e-12, "sign convention puts -0.6 positive");
        }

        assert!(matches!(eigendecompose(&g3, &kernel, 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn full_spectrum_reconstructs_kernel() {
        for q in [Quadrature::Unit, Quadrature::Trapezoid] {
            let g = grid(6, q);
            let mut rng = crate::rng::rng(9);
            let a = Array2::from_shape_fn((6, 6), |_| rng.random_range(-1.0..1.0));
            let kernel = &a + &a.t();
            let (vals, fns) = eigendecompose(&g, &kernel, 6).unwrap();
            for r in 0..6 {
                for t in 0..6 {
                    let rec: f64 = vals
                        .iter()
                        .zip(&fns)
                        .map(|(l, v)| l * v.values()[r] * v.values()[t])
                        .sum();
                    assert!((rec - kernel[[r, t]]).abs() < 1e-8);
                }
            }
            for (i, a) in fns.iter().enumerate() {
                for (j, b) in fns.iter().enumerate() {
                    let ip = g.dot(a.values(), b.values());
                    assert!((ip - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
                }
            }
            assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    fn random_pop(n: usize, d: usize, seed: u64, q: Quadrature) -> CurvePopulation {
        let mut rng = crate::rng::rng(seed);
        let values = Array2::from_shape_fn((n, d), |(i, t)| {
            (i as f64).sqrt() * (t as f64 * 0.7).sin() + rng.random_range(0.0..4.0)
        });
        CurvePopulation::new(grid(d, q), values, None, None).unwrap()
    }

    #[test]
    fn untruncated_full_basis_on_census_is_exact() {
        let pop = random_pop(12, 5, 1, Quadrature::Unit);
        let census = Design::srs(12, 12).unwrap().draw(0);
        let data = SampleData::new(&pop, &census).unwrap();
        let cfg = SpcaConfig { k: 5, ..Default::default() };
        let est = r2_estimate(&data, &cfg, None).unwrap();
        for (a, b) in est.curve.values().iter().zip(population_total(&pop).values()) {
            assert!((a - b).abs() < 1e-8 * b.abs().max(1.0));
        }
    }

    #[test]
    fn untruncated_full_basis_reproduces_ht_for_any_median() {
        for q in [Quadrature::Unit, Quadrature::Trapezoid] {
            let pop = random_pop(30, 4, 2, q);
            let data = SampleData::new(&pop, &Design::srs(30, 10).unwrap().draw(5)).unwrap();
            let pca = SphericalPca::fit(&data, &SpcaConfig { k: 4, ..Default::default() }).unwrap();
            let mut shifted = pca.clone();
            shifted.median.curve = Curve::new(vec![3.0, -1.0, 0.5, 9.0], data.grid.clone()).unwrap();
            let ht = ht_total(&data);
            for p in [&pca, &shifted] {
                let s = ScoreSet::compute(p, &data, None).unwrap();
                let est = r2_from_fit(p, &s, 30, Tuning::Minimax).unwrap();
                for (a, b) in est.curve.values().iter().zip(ht.values()) {
                    assert!((a - b).abs() < 1e-8 * b.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn homogeneous_sample_needs_no_correction() {
        let g = grid(3, Quadrature::Unit);
        let pop = CurvePopulation::new(g, Array2::from_shape_fn((8, 3), |(_, t)| t as f64 + 1.0), None, None).unwrap();
        let data = SampleData::new(&pop, &Design::srs(8, 4).unwrap().draw(2)).unwrap();
        let cfg = SpcaConfig { k: 2, ..Default::default() };
        let robust = r2_estimate(&data, &cfg, Some(Tuning::Minimax)).unwrap();
        let plain = r2_estimate(&data, &cfg, None).unwrap();
        assert_eq!(robust.curve, plain.curve);
        assert!(robust.delta.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn outlying_score_correction_matches_minimax() {
        let pop = random_pop(40, 6, 3, Quadrature::Unit);
        let mut values = pop.values().clone();
        values.row_mut(7).mapv_inplace(|v| v * 25.0);
        let pop = CurvePopulation::new(pop.grid().clone(), values, None, None).unwrap();
        let design = Design::srs(40, 12).unwrap();
        let draw = (0..).map(|s| design.draw(s)).find(|d| d.contains(7)).unwrap();
        let data = SampleData::new(&pop, &draw).unwrap();
        let cfg = SpcaConfig { k: 3, ..Default::default() };
        let pca = SphericalPca::fit(&data, &cfg).unwrap();
        let robust = ScoreSet::compute(&pca, &data, Some(Tuning::Minimax)).unwrap();
        let plain = ScoreSet::compute(&pca, &data, None).unwrap();
        let est = r2_from_fit(&pca, &robust, 40, Tuning::Minimax).unwrap();
        let base = r2_from_fit(&pca, &plain, 40, Tuning::Minimax).unwrap();
        let mut expected = vec![0.0; 6];
        for (k, v) in pca.eigenfunctions.iter().enumerate() {
            let d = minimax_delta(&robust.biases.column(k).to_vec()).unwrap();
            for (e, x) in expected.iter_mut().zip(v.values()) {
                *e += d * x;
            }
        }
        for ((a, b), e) in est.curve.values().iter().zip(base.curve.values()).zip(&expected) {
            assert!((a - b - e).abs() < 1e-8 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn k_larger_than_sample_is_rejected() {
        let pop = random_pop(10, 8, 1, Quadrature::Unit);
        let data = SampleData::new(&pop, &Design::srs(10, 3).unwrap().draw(0)).unwrap();
        let cfg = SpcaConfig { k: 5, ..Default::default() };
        assert!(matches!(SphericalPca::fit(&data, &cfg), Err(Error::Dimension(_))));
    }

    fn cloud() -> impl Strategy<Value = (Array2<f64>, Vec<f64>)> {
        (3usize..10, 2usize..5).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(-10.0..10.0f64, n * d)
                    .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap()),
                prop::collection::vec(0.5..5.0f64, n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weiszfeld_objective_never_increases((y, w) in cloud()) {
            let g = grid(y.ncols(), Quadrature::Trapezoid);
            if let Ok(med) = geometric_median(&g, y.view(), &w, 1e-10, 2000) {
                for pair in med.objective_trace.windows(2) {
                    prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-12));
                }
            }
        }

        #[test]
        fn median_is_translation_equivariant((y, w) in cloud(), shift in prop::collection::vec(-5.0..5.0f64, 4)) {
            let d = y.ncols();
            let g = grid(d, Quadrature::Unit);
            let moved = Array2::from_shape_fn(y.dim(), |(i, t)| y[[i, t]] + shift[t]);
            let a = geometric_median(&g, y.view(), &w, 1e-12, 5000);
            let b = geometric_median(&g, moved.view(), &w, 1e-12, 5000);
            if let (Ok(a), Ok(b)) = (a, b) {
                for t in 0..d {
                    prop_assert!((a.curve.values()[t] + shift[t] - b.curve.values()[t]).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn scores_satisfy_bessel((y, w) in cloud(), trapezoid in any::<bool>()) {
            let (n, d) = y.dim();
            let q = if trapezoid { Quadrature::Trapezoid } else { Quadrature::Unit };
            let g = grid(d, q);
            let pop = CurvePopulation::new(g, y, None, None).unwrap();
            let mut data = SampleData::new(&pop, &Design::srs(n, n).unwrap().draw(0)).unwrap();
            data.weights = w;
            let k = d.min(n).min(3);
            if let Ok(pca) = SphericalPca::fit(&data, &SpcaConfig { k, tol: 1e-10, max_iter: 5000 }) {
                prop_assert!(pca.eigenvalues.iter().all(|l| *l >= -1e-10));
                for (i, a) in pca.eigenfunctions.iter().enumerate() {
                    for (j, b) in pca.eigenfunctions.iter().enumerate() {
                        let expected = if i == j { 1.0 } else { 0.0 };
                        let ip = data.grid.dot(a.values(), b.values());
                        prop_assert!((ip - expected).abs() < 1e-8);
                    }
                }
                let s = pca.scores(&data);
                for (r, row) in data.values.rows().into_iter().enumerate() {
                    let c: Vec<f64> = row.iter().zip(pca.median.curve.values()).map(|(y, m)| y - m).collect();
                    let proj: f64 = s.row(r).iter().map(|x| x * x).sum();
                    prop_assert!(proj <= data.grid.dot(&c, &c) * (1.0 + 1e-9) + 1e-12);
                }
            }
        }
    }
}
