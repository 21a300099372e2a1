//! Robust estimator based on functional depth: the deepest half of the
//! conditional-bias curves defines a band, and every bias curve is clamped
//! to a dilated copy of that band.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::Serialize;

use crate::curves::Curve;
use crate::error::{Error, Result};
use crate::ht_estimator::CondBiasMatrix;
use crate::robust_pointwise::{EstimatorKind, RobustTotalEstimate, Tuning};

pub const DEFAULT_WINDOW: usize = 5;
const ALPHA_GRID: usize = 2001;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthRanking {
    pub mbd: Vec<f64>,
    /// Row indices of the `⌈n/2⌉` deepest curves, deepest first.
    pub central_set: Vec<usize>,
}

fn pairs(k: usize) -> u64 {
    (k as u64) * (k as u64).saturating_sub(1) / 2
}

/// Modified band depth of each row over all unordered pairs of rows, bands
/// inclusive. A row lies in the band of a pair at `t` unless both members
/// are strictly below it or both strictly above it.
pub fn mbd(rows: ArrayView2<f64>) -> Result<DepthRanking> {
    let (n, d) = rows.dim();
    if n < 3 {
        return Err(Error::SampleTooSmall(n));
    }
    let counts: Vec<u64> = (0..d)
        .into_par_iter()
        .map(|t| {
            let col = rows.column(t);
            let mut sorted: Vec<f64> = col.to_vec();
            sorted.sort_by(f64::total_cmp);
            col.iter()
                .map(|&x| {
                    let below = sorted.partition_point(|v| *v < x);
                    let above = n - sorted.partition_point(|v| *v <= x);
                    pairs(n) - pairs(below) - pairs(above)
                })
                .collect::<Vec<u64>>()
        })
        .reduce(
            || vec![0u64; n],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let denom = (pairs(n) * d as u64) as f64;
    let depth: Vec<f64> = counts.iter().map(|&c| c as f64 / denom).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| depth[b].total_cmp(&depth[a]).then(a.cmp(&b)));
    order.truncate(n.div_ceil(2));
    Ok(DepthRanking {
        mbd: depth,
        central_set: order,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Envelope {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub mean_bias: Vec<f64>,
    pub window: usize,
}

/// Centered moving average over `window` points, shortened at the edges.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let half = window.max(1) / 2;
    (0..x.len())
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Pointwise band of the central set, smoothed, with the unsmoothed mean of
/// all rows.
pub fn central_envelope(rows: ArrayView2<f64>, ranking: &DepthRanking, window: usize) -> Envelope {
    let (n, d) = rows.dim();
    let mut lower = vec![f64::INFINITY; d];
    let mut upper = vec![f64::NEG_INFINITY; d];
    for &i in &ranking.central_set {
        for (t, &v) in rows.row(i).iter().enumerate() {
            lower[t] = lower[t].min(v);
            upper[t] = upper[t].max(v);
        }
    }
    let mut lower = moving_average(&lower, window);
    let mut upper = moving_average(&upper, window);
    for (l, u) in lower.iter_mut().zip(upper.iter_mut()) {
        if *l > *u {
            std::mem::swap(l, u);
        }
    }
    let mean_bias = (0..d).map(|t| rows.column(t).sum() / n as f64).collect();
    Envelope {
        lower,
        upper,
        mean_bias,
        window,
    }
}

impl Envelope {
    /// Bounds `μ + α (L - μ)` and `μ + α (U - μ)` at grid index `t`.
    #[inline]
    pub fn band(&self, t: usize, alpha: f64) -> (f64, f64) {
        let mu = self.mean_bias[t];
        (mu + alpha * (self.lower[t] - mu), mu + alpha * (self.upper[t] - mu))
    }

    /// Smallest `α ≥ 1` for which no row is clamped; rows that no dilation
    /// can reach are ignored.
    pub fn alpha_max(&self, rows: ArrayView2<f64>) -> f64 {
        let mut alpha: f64 = 1.0;
        for row in rows.rows() {
            for (t, &b) in row.iter().enumerate() {
                let mu = self.mean_bias[t];
                let gap = if b > mu {
                    self.upper[t] - mu
                } else if b < mu {
                    self.lower[t] - mu
                } else {
                    continue;
                };
                let need = (b - mu) / gap;
                if gap != 0.0 && need.is_finite() && need > 0.0 {
                    alpha = alpha.max(need);
                }
            }
        }
        alpha
    }

    /// `Δ_α(t) = Σ_i (ψ_α(B_i(t)) - B_i(t))`.
    pub fn delta(&self, rows: ArrayView2<f64>, alpha: f64) -> Vec<f64> {
        let mut out = vec![0.0; rows.ncols()];
        for row in rows.rows() {
            for (t, (&b, o)) in row.iter().zip(out.iter_mut()).enumerate() {
                let (lo, hi) = self.band(t, alpha);
                *o += b.min(hi).max(lo) - b;
            }
        }
        out
    }
}

/// `ψ_α(B)(t) = max(min(B(t), μ + α(U - μ)), μ + α(L - μ))`.
pub fn psi_alpha(row: &[f64], env: &Envelope, alpha: f64) -> Vec<f64> {
    row.iter()
        .enumerate()
        .map(|(t, &b)| {
            let (lo, hi) = env.band(t, alpha);
            b.min(hi).max(lo)
        })
        .collect()
}

/// Criterion minimized over `α`, up to a positive factor.
fn objective(rows: ArrayView2<f64>, env: &Envelope, alpha: f64, tuning: Tuning, scale: f64) -> f64 {
    let delta = env.delta(rows, alpha);
    let d = rows.ncols() as f64;
    match tuning {
        Tuning::Minimax => rows
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(&delta).map(|(b, x)| (b + x).abs()).sum::<f64>() / d)
            .fold(0.0, f64::max),
        Tuning::QPower(q) => {
            rows.rows()
                .into_iter()
                .map(|row| {
                    row.iter()
                        .zip(&delta)
                        .map(|(b, x)| ((b + x).abs() / scale).powf(q))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / d
        }
    }
}

/// Dilation factor minimizing the criterion: a scan of 2,001 equally spaced
/// values on `[0, α_max]`, refined by golden-section search around the best.
pub fn optimal_alpha(rows: ArrayView2<f64>, env: &Envelope, tuning: Tuning) -> Result<f64> {
    if let Tuning::QPower(q) = tuning {
        if q.is_nan() || q <= 1.0 {
            return Err(Error::UnsupportedExponent(q));
        }
    }
    let scale = rows.iter().fold(0.0_f64, |m, b| m.max(b.abs()));
    if scale == 0.0 {
        return Ok(env.alpha_max(rows));
    }
    let top = env.alpha_max(rows);
    let step = top / (ALPHA_GRID - 1) as f64;
    let scan: Vec<f64> = (0..ALPHA_GRID)
        .into_par_iter()
        .map(|k| objective(rows, env, k as f64 * step, tuning, scale))
        .collect();
    // the last minimizer keeps the least truncation among ties
    let best = (0..ALPHA_GRID)
        .rev()
        .min_by(|&a, &b| scan[a].total_cmp(&scan[b]))
        .unwrap();
    let mut best_alpha = best as f64 * step;
    let mut best_value = scan[best];

    let (mut a, mut b) = (best.saturating_sub(1) as f64 * step, ((best + 1).min(ALPHA_GRID - 1)) as f64 * step);
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let mut f1 = objective(rows, env, x1, tuning, scale);
    let mut f2 = objective(rows, env, x2, tuning, scale);
    while b - a > 1e-9 * top.max(1.0) {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = objective(rows, env, x1, tuning, scale);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = objective(rows, env, x2, tuning, scale);
        }
    }
    for (x, f) in [(x1, f1), (x2, f2)] {
        if f < best_value {
            best_value = f;
            best_alpha = x;
        }
    }
    Ok(best_alpha)
}

/// Everything the depth estimator derives from a bias matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFit {
    pub ranking: DepthRanking,
    pub envelope: Envelope,
    pub alpha: f64,
    pub delta: Vec<f64>,
}

impl DepthFit {
    pub fn new(rows: ArrayView2<f64>, tuning: Tuning, window: usize) -> Result<Self> {
        let ranking = mbd(rows)?;
        let envelope = central_envelope(rows, &ranking, window);
        let alpha = optimal_alpha(rows, &envelope, tuning)?;
        let delta = envelope.delta(rows, alpha);
        Ok(DepthFit {
            ranking,
            envelope,
            alpha,
            delta,
        })
    }
}

/// `t̂^{R4}(t) = t̂(t) + Δ_{α_opt}(t)`.
pub fn r4_estimate(ht: &Curve, biases: &CondBiasMatrix, tuning: Tuning, window: usize) -> Result<RobustTotalEstimate> {
    if ht.len() != biases.rows.ncols() {
        return Err(Error::Dimension(format!(
            "total has {} points, biases have {}",
            ht.len(),
            biases.rows.ncols()
        )));
    }
    let fit = DepthFit::new(biases.rows.view(), tuning, window)?;
    let values = ht.values().iter().zip(&fit.delta).map(|(t, d)| t + d).collect();
    Ok(RobustTotalEstimate {
        curve: Curve::new(values, ht.grid().clone())?,
        kind: EstimatorKind::R4,
        tuning,
        constants: vec![fit.alpha],
        delta: fit.delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::{Quadrature, TimeGrid};
    use crate::ht_estimator::BiasMethod;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn literal_mbd(rows: &Array2<f64>) -> Vec<f64> {
        let (n, d) = rows.dim();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let mut count = 0u64;
            for j in 0..n {
                for k in j + 1..n {
                    for t in 0..d {
                        let (a, b) = (rows[[j, t]], rows[[k, t]]);
                        if a.min(b) <= rows[[i, t]] && rows[[i, t]] <= a.max(b) {
                            count += 1;
                        }
                    }
                }
            }
            *o = count as f64 / ((n * (n - 1) / 2 * d) as f64);
        }
        out
    }

    #[test]
    fn mbd_examples() {
        let rows = array![[0.0, 0.0, 0.0], [1.0, 2.0, 1.5], [5.0, 5.0, 5.0]];
        let r = mbd(rows.view()).unwrap();
        assert_eq!(r.mbd, vec![2.0 / 3.0, 1.0, 2.0 / 3.0]);
        assert_eq!(r.central_set, vec![1, 0]);

        let same = Array2::from_elem((4, 3), 2.0);
        assert!(mbd(same.view()).unwrap().mbd.iter().all(|v| *v == 1.0));

        assert!(matches!(mbd(array![[1.0], [2.0]].view()), Err(Error::SampleTooSmall(2))));
    }

    #[test]
    fn envelope_examples() {
        assert_eq!(moving_average(&[0.0, 0.0, 6.0, 6.0, 6.0], 3), vec![0.0, 2.0, 4.0, 6.0, 6.0]);
        assert_eq!(moving_average(&[1.0, 5.0, 2.0], 1), vec![1.0, 5.0, 2.0]);

        let rows = array![[1.0, 1.0], [1.0, 1.0], [9.0, -4.0]];
        let r = mbd(rows.view()).unwrap();
        let env = central_envelope(rows.view(), &r, 1);
        assert_eq!(env.lower, vec![1.0, 1.0]);
        assert_eq!(env.upper, vec![1.0, 1.0]);
        assert_eq!(env.mean_bias, vec![11.0 / 3.0, -2.0 / 3.0]);
    }

    #[test]
    fn psi_alpha_examples() {
        let env = Envelope {
            lower: vec![-1.0, -1.0],
            upper: vec![2.0, 2.0],
            mean_bias: vec![0.0, 0.0],
            window: 1,
        };
        assert_eq!(psi_alpha(&[3.0, 0.5], &env, 1.0), vec![2.0, 0.5]);
        assert_eq!(psi_alpha(&[3.0, -7.0], &env, 0.0), vec![0.0, 0.0]);
        assert_eq!(psi_alpha(&[3.0, -7.0], &env, 10.0), vec![3.0, -7.0]);
    }

    fn matrix(rows: Array2<f64>) -> CondBiasMatrix {
        let grid = Arc::new(TimeGrid::uniform(rows.ncols(), Quadrature::Unit).unwrap());
        CondBiasMatrix {
            rows,
            grid,
            method: BiasMethod::SrsClosed,
        }
    }

    fn ht(d: usize) -> Curve {
        Curve::constant(100.0, Arc::new(TimeGrid::uniform(d, Quadrature::Unit).unwrap()))
    }

    #[test]
    fn identical_rows_leave_ht_alone() {
        let b = matrix(Array2::from_shape_fn((5, 4), |(_, t)| t as f64 - 1.5));
        let est = r4_estimate(&ht(4), &b, Tuning::Minimax, 1).unwrap();
        assert!(est.curve.values().iter().all(|v| (v - 100.0).abs() < 1e-12));
    }

    fn random_rows(seed: u64, n: usize, d: usize) -> Array2<f64> {
        use rand::Rng;
        let mut rng = crate::rng::rng(seed);
        let mut rows = Array2::from_shape_fn((n, d), |_| rng.random_range(-3.0..3.0));
        rows.row_mut(0).mapv_inplace(|v| v + 40.0);
        // centred like conditional biases under SRS
        let mean = rows.mean_axis(ndarray::Axis(0)).unwrap();
        rows - &mean
    }

    #[test]
    fn scaling_rows_scales_correction() {
        let rows = random_rows(1, 9, 7);
        let kappa = 2.5;
        for tuning in [Tuning::Minimax, Tuning::QPower(4.0)] {
            let a = r4_estimate(&ht(7), &matrix(rows.clone()), tuning, 1).unwrap();
            let b = r4_estimate(&ht(7), &matrix(rows.mapv(|v| v * kappa)), tuning, 1).unwrap();
            assert!((a.constants[0] - b.constants[0]).abs() < 1e-6);
            for (x, y) in a.delta.iter().zip(&b.delta) {
                assert!((x * kappa - y).abs() < 1e-6 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn alpha_beats_dense_grid() {
        for seed in 0..4 {
            let rows = random_rows(seed, 11, 9);
            let r = mbd(rows.view()).unwrap();
            let env = central_envelope(rows.view(), &r, 3);
            let top = env.alpha_max(rows.view());
            for tuning in [Tuning::Minimax, Tuning::QPower(4.0), Tuning::QPower(10.0)] {
                let alpha = optimal_alpha(rows.view(), &env, tuning).unwrap();
                let mine = objective(rows.view(), &env, alpha, tuning, 1.0);
                for k in 0..2001 {
                    let a = top * k as f64 / 2000.0;
                    assert!(mine <= objective(rows.view(), &env, a, tuning, 1.0) * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn delta_vanishes_at_alpha_max() {
        use rand::Rng;
        let mut checked = 0;
        for seed in 0..20 {
            let mut rng = crate::rng::rng(seed);
            let rows = Array2::from_shape_fn((9, 5), |_| rng.random_range(-3.0..3.0));
            let mean = rows.mean_axis(ndarray::Axis(0)).unwrap();
            let rows = rows - &mean;
            let r = mbd(rows.view()).unwrap();
            let env = central_envelope(rows.view(), &r, 1);
            // only where the band straddles the mean can dilation reach every row
            let reachable = (0..5).all(|t| env.lower[t] < env.mean_bias[t] && env.mean_bias[t] < env.upper[t]);
            if !reachable {
                continue;
            }
            checked += 1;
            let top = env.alpha_max(rows.view());
            assert!(env.delta(rows.view(), top).iter().all(|v| v.abs() < 1e-12));
            let near = env.delta(rows.view(), top * (1.0 - 1e-9));
            assert!(near.iter().all(|v| v.abs() < 1e-6));
        }
        assert!(checked > 5);
    }

    fn small_matrix() -> impl Strategy<Value = Array2<f64>> {
        (3usize..9, 1usize..7).prop_flat_map(|(n, d)| {
            prop::collection::vec(prop::sample::select(vec![-2.0, -1.0, 0.0, 0.5, 1.0, 3.0]), n * d)
                .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn mbd_matches_triple_loop(rows in small_matrix()) {
            let fast = mbd(rows.view()).unwrap();
            prop_assert_eq!(&fast.mbd, &literal_mbd(&rows));
            prop_assert!(fast.mbd.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(fast.central_set.len(), rows.nrows().div_ceil(2));
        }

        #[test]
        fn mbd_ignores_grid_order_and_common_shift(rows in small_matrix(), shift in -5.0..5.0f64) {
            let base = mbd(rows.view()).unwrap().mbd;
            let mut rev = rows.clone();
            rev.invert_axis(ndarray::Axis(1));
            let shifted = rows.mapv(|v| v + shift);
            let a = mbd(rev.view()).unwrap().mbd;
            let b = mbd(shifted.view()).unwrap().mbd;
            for ((x, y), z) in base.iter().zip(&a).zip(&b) {
                prop_assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
            }
        }

        #[test]
        fn psi_alpha_grows_with_alpha(x in -10.0..10.0f64, mu in -2.0..2.0f64, l in -5.0..0.0f64, u in 0.0..5.0f64, a1 in 0.0..3.0f64, a2 in 0.0..3.0f64) {
            let env = Envelope { lower: vec![mu + l], upper: vec![mu + u], mean_bias: vec![mu], window: 1 };
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let p1 = psi_alpha(&[x], &env, lo)[0];
            let p2 = psi_alpha(&[x], &env, hi)[0];
            prop_assert!((p1 - mu).abs() <= (p2 - mu).abs() + 1e-12);
        }
    }
}
