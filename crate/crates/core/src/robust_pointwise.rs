//! Pointwise robust estimator: Huber truncation of estimated conditional
//! biases, tuned at each grid point.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::Curve;
use crate::error::{Error, Result};
use crate::ht_estimator::CondBiasMatrix;

/// Huber function `ψ_c(z) = sgn(z) min(|z|, c)`.
pub fn huber(z: f64, c: f64) -> f64 {
    z.clamp(-c, c)
}

/// `Δ(c) = Σ_i (ψ_c(B_i) - B_i)`.
pub fn delta(biases: &[f64], c: f64) -> f64 {
    biases.iter().map(|&b| huber(b, c) - b).sum()
}

/// Minimax correction `-(B_min + B_max) / 2`.
pub fn minimax_delta(biases: &[f64]) -> Result<f64> {
    let (lo, hi) = min_max(biases).ok_or(Error::EmptySample)?;
    Ok(-(lo + hi) / 2.0)
}

fn min_max(xs: &[f64]) -> Option<(f64, f64)> {
    let first = *xs.first()?;
    Some(
        xs.iter()
            .fold((first, first), |(lo, hi), &x| (lo.min(x), hi.max(x))),
    )
}

/// Minimizes `Σ_i |B_i + Δ(c)|^q` over `c ∈ [0, max|B_i|]`, returning
/// `(c_opt, Δ(c_opt))`.
///
/// `Δ(c)` is continuous and piecewise linear with kinks at the `|B_i|`, so
/// its image is the interval spanned by its values at the kinks. The
/// objective is strictly convex in `Δ`; its unconstrained minimizer is found
/// by bisection on the derivative and clamped into that image. Among the
/// constants attaining the optimum the largest is returned.
pub fn qpow_tune(biases: &[f64], q: f64) -> Result<(f64, f64)> {
    if q.is_nan() || q <= 1.0 {
        return Err(Error::UnsupportedExponent(q));
    }
    let (lo, hi) = min_max(biases).ok_or(Error::EmptySample)?;
    let scale = biases.iter().fold(0.0_f64, |m, b| m.max(b.abs()));
    if scale == 0.0 {
        return Ok((0.0, 0.0));
    }
    // g'(Δ) ∝ Σ sgn(u_i) |u_i|^(q-1), u_i = (B_i + Δ) / scale, increasing in Δ
    let slope = |d: f64| -> f64 {
        biases
            .iter()
            .map(|&b| {
                let u = (b + d) / scale;
                u.signum() * u.abs().powf(q - 1.0)
            })
            .sum()
    };
    let (mut a, mut b) = (-hi, -lo);
    while b - a > f64::EPSILON * scale {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if slope(m) > 0.0 {
            b = m;
        } else {
            a = m;
        }
    }
    let unconstrained = 0.5 * (a + b);
    let (img_lo, img_hi) = delta_image(biases);
    let target = unconstrained.clamp(img_lo, img_hi);
    let c = constant_for_delta(biases, target);
    Ok((c, delta(biases, c)))
}

/// Smallest and largest values of `Δ(c)` over `c ∈ [0, max|B_i|]`.
pub fn delta_image(biases: &[f64]) -> (f64, f64) {
    let mut lo = 0.0_f64;
    let mut hi = 0.0_f64;
    for c in std::iter::once(0.0).chain(biases.iter().map(|b| b.abs())) {
        let d = delta(biases, c);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

/// Largest `c ∈ [0, max|B_i|]` with `Δ(c) = target`; when the target is not
/// attainable, the largest `c` whose `Δ(c)` is closest to it.
pub fn constant_for_delta(biases: &[f64], target: f64) -> f64 {
    let mut knots: Vec<f64> = biases.iter().map(|b| b.abs()).collect();
    knots.push(0.0);
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let top = *knots.last().unwrap();
    let tol = 1e-12 * (1.0 + biases.iter().map(|b| b.abs()).sum::<f64>());
    if target.abs() <= tol {
        return top;
    }
    // walk segments [knots[k-1], knots[k]] downward from the largest c
    for k in (1..knots.len()).rev() {
        let (left, right) = (knots[k - 1], knots[k]);
        let (dl, dr) = (delta(biases, left), delta(biases, right));
        if (dr - target).abs() <= tol {
            return right;
        }
        if target >= dl.min(dr) - tol && target <= dl.max(dr) + tol {
            if (dl - dr).abs() <= tol {
                return right;
            }
            // linear on the open segment
            let c = left + (target - dl) / (dr - dl) * (right - left);
            return c.clamp(left, right);
        }
    }
    let mut best = (f64::INFINITY, top);
    for &c in knots.iter().rev() {
        let gap = (delta(biases, c) - target).abs();
        if gap < best.0 {
            best = (gap, c);
        }
    }
    best.1
}

/// How the Huber constant is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "q", rename_all = "lowercase")]
pub enum Tuning {
    #[default]
    Minimax,
    #[serde(rename = "qpow")]
    QPower(f64),
}

impl fmt::Display for Tuning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tuning::Minimax => write!(f, "minimax"),
            Tuning::QPower(q) => write!(f, "q{q}"),
        }
    }
}

impl FromStr for Tuning {
    type Err = Error;

    /// Accepts `minimax`, `qpow` (q = 4), `qpow:10` and `q10`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "minimax" {
            return Ok(Tuning::Minimax);
        }
        if s == "qpow" {
            return Ok(Tuning::QPower(4.0));
        }
        let q = s
            .strip_prefix("qpow:")
            .or_else(|| s.strip_prefix('q'))
            .and_then(|r| r.parse::<f64>().ok())
            .ok_or_else(|| Error::Config(format!("unknown tuning rule {s:?}")))?;
        if q.is_nan() || q <= 1.0 {
            return Err(Error::UnsupportedExponent(q));
        }
        Ok(Tuning::QPower(q))
    }
}

/// Tunes one vector of conditional biases, returning `(c, Δ)`.
pub fn tune(biases: &[f64], tuning: Tuning) -> Result<(f64, f64)> {
    match tuning {
        Tuning::Minimax => {
            let d = minimax_delta(biases)?;
            Ok((constant_for_delta(biases, d), d))
        }
        Tuning::QPower(q) => qpow_tune(biases, q),
    }
}

/// Tunes every column of an `n × m` matrix of biases in parallel.
pub fn tune_columns(rows: ndarray::ArrayView2<f64>, tuning: Tuning) -> Result<(Vec<f64>, Vec<f64>)> {
    if rows.nrows() == 0 {
        return Err(Error::EmptySample);
    }
    let per_column: Vec<(f64, f64)> = (0..rows.ncols())
        .into_par_iter()
        .map(|k| tune(&rows.column(k).to_vec(), tuning))
        .collect::<Result<_>>()?;
    Ok(per_column.into_iter().unzip())
}

/// Which robust estimator produced a [`RobustTotalEstimate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Ht,
    R1,
    R2,
    R3,
    R4,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EstimatorKind::Ht => "ht",
            EstimatorKind::R1 => "r1",
            EstimatorKind::R2 => "r2",
            EstimatorKind::R3 => "r3",
            EstimatorKind::R4 => "r4",
        };
        f.write_str(s)
    }
}

/// A robust total with the constants and corrections that produced it.
///
/// `constants` and `delta` are per grid point for R1, per principal score
/// (after the median term) for R2, per wavelet coefficient for R3, and hold
/// the single dilation factor for R4.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustTotalEstimate {
    pub curve: Curve,
    pub kind: EstimatorKind,
    pub tuning: Tuning,
    pub constants: Vec<f64>,
    pub delta: Vec<f64>,
}

impl RobustTotalEstimate {
    pub fn label(&self) -> String {
        format!("{}-{}", self.kind, self.tuning)
    }
}

/// `t̂^{R1}(t) = t̂(t) + Δ(c(t))` at every grid point.
pub fn r1_estimate(ht: &Curve, biases: &CondBiasMatrix, tuning: Tuning) -> Result<RobustTotalEstimate> {
    if ht.len() != biases.rows.ncols() {
        return Err(Error::Dimension(format!(
            "total has {} points, biases have {}",
            ht.len(),
            biases.rows.ncols()
        )));
    }
    let (constants, delta) = tune_columns(biases.rows.view(), tuning)?;
    let values = ht.values().iter().zip(&delta).map(|(t, d)| t + d).collect();
    Ok(RobustTotalEstimate {
        curve: Curve::new(values, ht.grid().clone())?,
        kind: EstimatorKind::R1,
        tuning,
        constants,
        delta,
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

    fn max_abs_objective(biases: &[f64], d: f64) -> f64 {
        biases.iter().fold(0.0, |m: f64, b| m.max((b + d).abs()))
    }

    fn qpow_objective(biases: &[f64], d: f64, q: f64) -> f64 {
        biases.iter().map(|b| (b + d).abs().powf(q)).sum()
    }

    fn grid_values(max: f64, points: usize) -> impl Iterator<Item = f64> {
        (0..points).map(move |k| max * k as f64 / (points - 1) as f64)
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber(2.0, 3.0), 2.0);
        assert_eq!(huber(-5.0, 3.0), -3.0);
        assert_eq!(huber(0.0, 0.0), 0.0);
    }

    #[test]
    fn delta_examples() {
        let b = [-2.0, 1.0, 5.0];
        assert_eq!(delta(&b, 5.0), 0.0);
        assert_eq!(delta(&b, 0.0), -4.0);
        assert_eq!(delta(&b, 2.0), -3.0);
    }

    #[test]
    fn minimax_examples() {
        assert_eq!(minimax_delta(&[-2.0, 1.0, 5.0]).unwrap(), -1.5);
        assert_eq!(minimax_delta(&[-3.0, 0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(minimax_delta(&[4.0, 4.0]).unwrap(), -4.0);
        assert!(matches!(minimax_delta(&[]), Err(Error::EmptySample)));

        // the dense grid over c agrees
        let b = [-2.0, 1.0, 5.0];
        let best = grid_values(5.0, 50_001)
            .map(|c| max_abs_objective(&b, delta(&b, c)))
            .fold(f64::INFINITY, f64::min);
        assert!((best - max_abs_objective(&b, -1.5)).abs() < 1e-3);
        let c = constant_for_delta(&b, -1.5);
        assert!((delta(&b, c) + 1.5).abs() < 1e-12);
    }

    #[test]
    fn qpow_examples() {
        let (c, d) = qpow_tune(&[-3.0, 3.0], 4.0).unwrap();
        assert_eq!(d, 0.0);
        assert!(c >= 3.0);

        let b = [-2.0, 1.0, 5.0];
        let (_, d) = qpow_tune(&b, 10.0).unwrap();
        assert!((d + 1.5).abs() <= 0.5);
        let oracle = grid_values(5.0, 100_001)
            .map(|c| qpow_objective(&b, delta(&b, c), 10.0))
            .fold(f64::INFINITY, f64::min);
        assert!(qpow_objective(&b, d, 10.0) <= oracle * (1.0 + 1e-9));

        let (c, d) = qpow_tune(&[5.0], 4.0).unwrap();
        assert_eq!(c, 0.0);
        assert_eq!(d, -5.0);

        assert!(matches!(qpow_tune(&b, 1.0), Err(Error::UnsupportedExponent(_))));
        assert!(matches!(qpow_tune(&b, 0.5), Err(Error::UnsupportedExponent(_))));
        assert!(matches!(qpow_tune(&[], 4.0), Err(Error::EmptySample)));
    }

    #[test]
    fn tuning_parses() {
        assert_eq!("minimax".parse::<Tuning>().unwrap(), Tuning::Minimax);
        assert_eq!("qpow".parse::<Tuning>().unwrap(), Tuning::QPower(4.0));
        assert_eq!("q10".parse::<Tuning>().unwrap(), Tuning::QPower(10.0));
        assert_eq!("qpow:4".parse::<Tuning>().unwrap(), Tuning::QPower(4.0));
        assert!("q1".parse::<Tuning>().is_err());
        assert!("tukey".parse::<Tuning>().is_err());
    }

    fn matrix(rows: Array2<f64>) -> CondBiasMatrix {
        let grid = Arc::new(TimeGrid::uniform(rows.ncols(), Quadrature::Unit).unwrap());
        CondBiasMatrix {
            rows,
            grid,
            method: BiasMethod::SrsClosed,
        }
    }

    #[test]
    fn r1_examples() {
        let grid = Arc::new(TimeGrid::uniform(2, Quadrature::Unit).unwrap());
        let ht = Curve::new(vec![10.0, 20.0], grid).unwrap();
        let zero = matrix(Array2::zeros((3, 2)));
        for tuning in [Tuning::Minimax, Tuning::QPower(4.0)] {
            assert_eq!(r1_estimate(&ht, &zero, tuning).unwrap().curve, ht);
        }

        let b = matrix(array![[-2.0, 0.0], [1.0, 0.0], [5.0, 0.0]]);
        let est = r1_estimate(&ht, &b, Tuning::Minimax).unwrap();
        assert_eq!(est.curve.values(), &[8.5, 20.0]);
        assert_eq!(est.kind, EstimatorKind::R1);

        let kappa = 3.5;
        let scaled = matrix(b.rows.mapv(|v| v * kappa));
        let est2 = r1_estimate(&ht, &scaled, Tuning::Minimax).unwrap();
        for (a, b) in est.delta.iter().zip(&est2.delta) {
            assert!((a * kappa - b).abs() < 1e-12);
        }
    }

    fn bias_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0..50.0f64, 1..12)
    }

    proptest! {
        #[test]
        fn huber_is_odd_monotone_lipschitz(z in -100.0..100.0f64, w in -100.0..100.0f64, c in 0.0..50.0f64) {
            prop_assert_eq!(huber(-z, c), -huber(z, c));
            prop_assert!(huber(z, c).abs() <= c);
            if z <= w {
                prop_assert!(huber(z, c) <= huber(w, c));
            }
            prop_assert!((huber(z, c) - huber(w, c)).abs() <= (z - w).abs() + 1e-12);
        }

        #[test]
        fn delta_vanishes_at_max(b in bias_vec()) {
            let top = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            prop_assert_eq!(delta(&b, top), 0.0);
            let sum: f64 = b.iter().sum();
            prop_assert!((delta(&b, 0.0) + sum).abs() < 1e-9);
        }

        #[test]
        fn delta_is_continuous(b in bias_vec(), c in 0.0..50.0f64) {
            let h = 1e-7;
            prop_assert!((delta(&b, c + h) - delta(&b, c)).abs() <= b.len() as f64 * h + 1e-11);
        }

        #[test]
        fn minimax_is_optimal_on_dense_grid(b in bias_vec()) {
            let d = minimax_delta(&b).unwrap();
            let best = max_abs_objective(&b, d);
            let top = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for c in grid_values(top, 2001) {
                prop_assert!(best <= max_abs_objective(&b, delta(&b, c)) + 1e-9);
            }
            let c = constant_for_delta(&b, d);
            prop_assert!((delta(&b, c) - d).abs() < 1e-9);
        }

        #[test]
        fn minimax_translation_equivariance(b in bias_vec(), a in -20.0..20.0f64) {
            let shifted: Vec<f64> = b.iter().map(|x| x + a).collect();
            let d0 = minimax_delta(&b).unwrap();
            let d1 = minimax_delta(&shifted).unwrap();
            prop_assert!((d1 - (d0 - a)).abs() < 1e-9);
        }

        #[test]
        fn qpow_beats_every_grid_point(b in bias_vec(), q in prop::sample::select(vec![2.0, 4.0, 10.0])) {
            let (c, d) = qpow_tune(&b, q).unwrap();
            prop_assert!((delta(&b, c) - d).abs() < 1e-12);
            let top = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            prop_assert!(c >= 0.0 && c <= top);
            let mine = qpow_objective(&b, d, q);
            for g in grid_values(top, 10_001) {
                prop_assert!(mine <= qpow_objective(&b, delta(&b, g), q) * (1.0 + 1e-9) + 1e-12);
            }
        }
    }
}
