//! Pointwise mean square error of the total estimators, by linearization or
//! by one of two bootstraps.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::Curve;
use crate::error::{Error, Result};
use crate::estimator::EstimatorSpec;
use crate::ht_estimator::{conditional_bias_estimated, ht_total};
use crate::rng::{self, domain};
use crate::robust_depth::{psi_alpha, DepthFit};
use crate::robust_pointwise::{huber, r1_estimate, RobustTotalEstimate, Tuning};
use crate::robust_spca::{eigendecompose, r2_from_fit, spherical_covariance, ScoreSet, SpcaConfig, SphericalPca};
use crate::robust_wavelet::{r3_from_table, CoefTable, WaveletBasis, WaveletFamily};
use crate::sampling::{SampleData, StratumSizes};

/// HT variance estimate of `Σ_{i∈s} d_i x_i` for every column of `values`,
/// in the closed form `Σ_h N_h² (1 - f_h) s_h² / n_h` of stratified SRS.
pub fn ht_variance(values: ArrayView2<f64>, data: &SampleData) -> Result<Vec<f64>> {
    let m = values.ncols();
    let mut out = vec![0.0; m];
    let mut mean = vec![0.0; m];
    for (h, sizes) in data.strata.iter().enumerate() {
        let rows = data.rows_in(h);
        if rows.is_empty() || sizes.sample == sizes.population {
            continue;
        }
        if rows.len() < 2 {
            return Err(Error::DegenerateStratum {
                stratum: h + 1,
                size: rows.len(),
            });
        }
        let nh = rows.len() as f64;
        mean.iter_mut().for_each(|x| *x = 0.0);
        for &r in rows {
            for (a, v) in mean.iter_mut().zip(values.row(r)) {
                *a += v / nh;
            }
        }
        let bign = sizes.population as f64;
        let factor = bign * bign * (1.0 - nh / bign) / (nh * (nh - 1.0));
        for &r in rows {
            for ((o, v), a) in out.iter_mut().zip(values.row(r)).zip(&mean) {
                *o += factor * (v - a) * (v - a);
            }
        }
    }
    Ok(out)
}

fn pair_probability(strata: &[StratumSizes], hi: usize, hj: usize, same_unit: bool) -> f64 {
    let p = |h: usize| strata[h].sample as f64 / strata[h].population as f64;
    if same_unit {
        p(hi)
    } else if hi != hj {
        p(hi) * p(hj)
    } else {
        let (n, bign) = (strata[hi].sample as f64, strata[hi].population as f64);
        n * (n - 1.0) / (bign * (bign - 1.0))
    }
}

/// Literal double sum
/// `Σ_{i,j∈s} (π_ij - π_i π_j) / π_ij · x_i / π_i · x_j / π_j`.
pub fn ht_variance_double_sum(values: ArrayView2<f64>, data: &SampleData) -> Result<Vec<f64>> {
    let (n, m) = values.dim();
    let mut out = vec![0.0; m];
    for i in 0..n {
        for j in 0..n {
            let (hi, hj) = (data.stratum[i], data.stratum[j]);
            let pij = pair_probability(&data.strata, hi, hj, i == j);
            if pij <= 0.0 {
                return Err(Error::Design(format!("zero joint inclusion probability for rows {i} and {j}")));
            }
            let (pi, pj) = (data.pi(i), data.pi(j));
            let coef = (pij - pi * pj) / (pij * pi * pj);
            for (o, (a, b)) in out.iter_mut().zip(values.row(i).iter().zip(values.row(j))) {
                *o += coef * a * b;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseMethod {
    Linearization,
    GrossBootstrap,
    GeneralizedBootstrap,
}

impl fmt::Display for MseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MseMethod::Linearization => "linearization",
            MseMethod::GrossBootstrap => "gross",
            MseMethod::GeneralizedBootstrap => "genboot",
        })
    }
}

impl FromStr for MseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linearization" | "lin" => Ok(MseMethod::Linearization),
            "gross" | "gross_bootstrap" => Ok(MseMethod::GrossBootstrap),
            "genboot" | "generalized" | "generalized_bootstrap" => Ok(MseMethod::GeneralizedBootstrap),
            other => Err(Error::Config(format!("unknown MSE method {other:?}"))),
        }
    }
}

/// Pointwise MSE estimate
/// `v(t̂^R) + max(0, (t̂^R - t̂)² - v(t̂^R - t̂))`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MseReport {
    pub method: MseMethod,
    pub replicates: Option<usize>,
    pub estimate: Vec<f64>,
    pub ht: Vec<f64>,
    pub v_robust: Vec<f64>,
    pub v_diff: Vec<f64>,
    /// Squared bias term, `(t̂^R - t̂)²` unless a known total was supplied.
    pub bias_sq: Vec<f64>,
    pub mse: Vec<f64>,
}

impl MseReport {
    fn assemble(
        method: MseMethod,
        replicates: Option<usize>,
        estimate: Vec<f64>,
        ht: Vec<f64>,
        v_robust: Vec<f64>,
        v_diff: Vec<f64>,
    ) -> Self {
        let bias_sq = estimate.iter().zip(&ht).map(|(r, t)| (r - t) * (r - t)).collect();
        let mut report = MseReport {
            method,
            replicates,
            estimate,
            ht,
            v_robust,
            v_diff,
            bias_sq,
            mse: Vec::new(),
        };
        report.finish();
        report
    }

    fn finish(&mut self) {
        self.mse = self
            .v_robust
            .iter()
            .zip(&self.v_diff)
            .zip(&self.bias_sq)
            .map(|((v, vd), b)| v + (b - vd).max(0.0))
            .collect();
    }

    /// Diagnostic variant with the bias term `(t̂^R - t_Y)²` computed from a
    /// known true total.
    pub fn with_known_total(&self, total: &[f64]) -> MseReport {
        let mut out = self.clone();
        out.bias_sq = self.estimate.iter().zip(total).map(|(r, t)| (r - t) * (r - t)).collect();
        out.finish();
        out
    }

    /// Linearization report from a per-unit correction matrix `z` (`n × D`):
    /// `v(t̂^R)` is the HT variance of `Y + z`, `v(t̂^R - t̂)` that of `z`.
    pub fn from_linearized(data: &SampleData, z: &Array2<f64>, estimate: &Curve) -> Result<Self> {
        if z.dim() != data.values.dim() {
            return Err(Error::Dimension("correction matrix does not match the sample".into()));
        }
        let linearized = &data.values + z;
        let v_robust = ht_variance(linearized.view(), data)?;
        let v_diff = ht_variance(z.view(), data)?;
        Ok(MseReport::assemble(
            MseMethod::Linearization,
            None,
            estimate.values().to_vec(),
            ht_total(data).into_values(),
            v_robust,
            v_diff,
        ))
    }
}

/// `π_i (ψ_c(B_i) - B_i)` with one constant per column.
pub fn pointwise_z(biases: ArrayView2<f64>, constants: &[f64], data: &SampleData) -> Array2<f64> {
    let mut z = Array2::zeros(biases.dim());
    for ((r, k), o) in z.indexed_iter_mut() {
        let b = biases[[r, k]];
        *o = data.pi(r) * (huber(b, constants[k]) - b);
    }
    z
}

/// Fits the estimator and returns it with its linearized correction
/// variables: the HT variance of `Y + z` estimates the variance of the
/// estimator, that of `z` the variance of its difference with HT.
pub fn z_variables(spec: &EstimatorSpec, data: &SampleData) -> Result<(RobustTotalEstimate, Array2<f64>)> {
    match spec {
        EstimatorSpec::Ht => Ok((spec.estimate(data)?, Array2::zeros(data.values.dim()))),
        EstimatorSpec::R1 { tuning } => {
            let biases = conditional_bias_estimated(data)?;
            let est = r1_estimate(&ht_total(data), &biases, *tuning)?;
            let z = pointwise_z(biases.rows.view(), &est.constants, data);
            Ok((est, z))
        }
        EstimatorSpec::R4 { .. } => {
            let est = spec.estimate(data)?;
            let biases = conditional_bias_estimated(data)?;
            let (tuning, window) = match spec {
                EstimatorSpec::R4 { tuning, window } => (*tuning, *window),
                _ => unreachable!(),
            };
            let fit = DepthFit::new(biases.rows.view(), tuning, window)?;
            let mut z = Array2::zeros(data.values.dim());
            for (r, mut row) in z.rows_mut().into_iter().enumerate() {
                let b = biases.rows.row(r).to_vec();
                let psi = psi_alpha(&b, &fit.envelope, fit.alpha);
                for ((o, p), b) in row.iter_mut().zip(&psi).zip(&b) {
                    *o = data.pi(r) * (p - b);
                }
            }
            Ok((est, z))
        }
        EstimatorSpec::R3 { tuning, wavelet } => r3_z(data, *wavelet, *tuning),
        EstimatorSpec::R2 { tuning, spca } => r2_z(data, spca, *tuning),
    }
}

fn r3_z(data: &SampleData, family: WaveletFamily, tuning: Tuning) -> Result<(RobustTotalEstimate, Array2<f64>)> {
    let basis = WaveletBasis::new(family, data.dim())?;
    let table = CoefTable::compute(data, &basis, Some(tuning))?;
    let est = r3_from_table(&data.grid, &basis, &table, tuning)?;
    let coef_z = pointwise_z(table.biases.view(), &table.constants, data);
    let mut z = Array2::zeros(data.values.dim());
    for (r, mut row) in z.rows_mut().into_iter().enumerate() {
        let back = basis.idwt(&coef_z.row(r).to_vec())?;
        row.assign(&ndarray::ArrayView1::from(&back));
    }
    Ok((est, z))
}

/// Linearized variables of the spherical-PCA estimator.
///
/// Per unit, `L_i = u_i + Σ_k (F̂_k ṽ_ik + ⟨Y_i - m̂, v̂_k⟩ v̂_k + π_i (ψ(B^F_ik) - B^F_ik) v̂_k)`
/// where `u_i = H⁻¹ ũ_i` linearizes the median through the Hessian
/// `H = (1/N) Σ d_i (I - ũ_i ũ_iᵀ) / ‖Y_i - m̂‖` of its estimating equation and
/// `ṽ_ik` is the first-order perturbation of the k-th eigenfunction. The
/// returned `z` is `L - Y`.
fn r2_z(data: &SampleData, config: &SpcaConfig, tuning: Tuning) -> Result<(RobustTotalEstimate, Array2<f64>)> {
    let pca = SphericalPca::fit(data, config)?;
    let scores = ScoreSet::compute(&pca, data, Some(tuning))?;
    let est = r2_from_fit(&pca, &scores, data.population_size, tuning)?;
    let lin = R2Linearization::new(&pca, data)?;
    let (n, d) = data.values.dim();
    let mut z = Array2::zeros((n, d));
    for r in 0..n {
        let mut l = lin.median_term(r);
        for (k, v) in pca.eigenfunctions.iter().enumerate() {
            let vt = lin.eigen_term(r, k);
            let b = scores.biases[[r, k]];
            let coef = scores.scores[[r, k]] + data.pi(r) * (huber(b, scores.constants[k]) - b);
            for t in 0..d {
                l[t] += scores.totals[k] * vt[t] + coef * v.values()[t];
            }
        }
        for t in 0..d {
            z[[r, t]] = l[t] - data.values[[r, t]];
        }
    }
    Ok((est, z))
}

/// Pieces of the spherical-PCA linearization shared by all units.
pub struct R2Linearization {
    /// Sphericised residuals `ũ_i`, zero for units at the median.
    directions: Array2<f64>,
    median_terms: Array2<f64>,
    eigenvalues: Vec<f64>,
    eigenfunctions: Vec<Vec<f64>>,
    k: usize,
    weights: Vec<f64>,
    inv_n: f64,
}

impl R2Linearization {
    pub fn new(pca: &SphericalPca, data: &SampleData) -> Result<Self> {
        let grid = &data.grid;
        let (n, d) = data.values.dim();
        let m = pca.median.curve.values();
        let inv_n = 1.0 / data.population_size as f64;
        let root: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
        let mut directions = Array2::zeros((n, d));
        let mut hessian = DMatrix::<f64>::zeros(d, d);
        for r in 0..n {
            let centred: Vec<f64> = data.values.row(r).iter().zip(m).map(|(y, m)| y - m).collect();
            let dist = grid.norm(&centred);
            if dist <= 0.0 {
                continue;
            }
            let a = data.weights[r] * inv_n / dist;
            let zr: Vec<f64> = centred.iter().zip(&root).map(|(c, s)| s * c / dist).collect();
            for (t, c) in centred.iter().enumerate() {
                directions[[r, t]] = c / dist;
            }
            for i in 0..d {
                hessian[(i, i)] += a;
                for j in 0..d {
                    hessian[(i, j)] -= a * zr[i] * zr[j];
                }
            }
        }
        let chol = hessian
            .cholesky()
            .ok_or_else(|| Error::Dimension("median Hessian is singular".into()))?;
        let mut median_terms = Array2::zeros((n, d));
        for r in 0..n {
            let rhs = DVector::from_fn(d, |t, _| root[t] * directions[[r, t]]);
            let x = chol.solve(&rhs);
            for t in 0..d {
                median_terms[[r, t]] = x[t] / root[t];
            }
        }
        let (kernel, _) = spherical_covariance(
            grid,
            data.values.view(),
            &data.weights,
            m,
            data.population_size,
        );
        let (eigenvalues, functions) = eigendecompose(grid, &kernel, d)?;
        Ok(R2Linearization {
            directions,
            median_terms,
            eigenvalues,
            eigenfunctions: functions.into_iter().map(Curve::into_values).collect(),
            k: pca.k(),
            weights: grid.weights().to_vec(),
            inv_n,
        })
    }

    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights.iter().zip(a.iter().zip(b)).map(|(w, (x, y))| w * x * y).sum()
    }

    /// `u_i`, the linearized variable of `N m̂`.
    pub fn median_term(&self, r: usize) -> Vec<f64> {
        self.median_terms.row(r).to_vec()
    }

    /// `ṽ_ik = (1/N) Σ_{l≠k} ⟨ũ_i, v_k⟩ ⟨ũ_i, v_l⟩ v_l / (λ_k - λ_l)`.
    pub fn eigen_term(&self, r: usize, k: usize) -> Vec<f64> {
        assert!(k < self.k);
        let u = self.directions.row(r).to_vec();
        let d = u.len();
        let mut out = vec![0.0; d];
        let ck = self.dot(&u, &self.eigenfunctions[k]);
        if ck == 0.0 {
            return out;
        }
        let scale = self.eigenvalues[0].abs().max(f64::MIN_POSITIVE);
        for (l, v) in self.eigenfunctions.iter().enumerate() {
            let gap = self.eigenvalues[k] - self.eigenvalues[l];
            if l == k || gap.abs() <= 1e-12 * scale {
                continue;
            }
            let coef = self.inv_n * ck * self.dot(&u, v) / gap;
            for (o, x) in out.iter_mut().zip(v) {
                *o += coef * x;
            }
        }
        out
    }
}

/// Linearization-based MSE estimate.
pub fn mse_linearized(spec: &EstimatorSpec, data: &SampleData) -> Result<MseReport> {
    let (est, z) = z_variables(spec, data)?;
    MseReport::from_linearized(data, &z, &est.curve)
}

fn replicate_report(
    method: MseMethod,
    spec: &EstimatorSpec,
    data: &SampleData,
    replicates: Vec<(Vec<f64>, Vec<f64>)>,
) -> Result<MseReport> {
    let b = replicates.len();
    let d = data.dim();
    let mut mean_r = vec![0.0; d];
    let mut mean_diff = vec![0.0; d];
    for (r, h) in &replicates {
        for t in 0..d {
            mean_r[t] += r[t] / b as f64;
            mean_diff[t] += (r[t] - h[t]) / b as f64;
        }
    }
    let mut v_robust = vec![0.0; d];
    let mut v_diff = vec![0.0; d];
    for (r, h) in &replicates {
        for t in 0..d {
            v_robust[t] += (r[t] - mean_r[t]).powi(2) / (b - 1) as f64;
            v_diff[t] += (r[t] - h[t] - mean_diff[t]).powi(2) / (b - 1) as f64;
        }
    }
    let estimate = spec.estimate(data)?.curve.into_values();
    Ok(MseReport::assemble(
        method,
        Some(b),
        estimate,
        ht_total(data).into_values(),
        v_robust,
        v_diff,
    ))
}

fn run_replicate(spec: &EstimatorSpec, data: &SampleData) -> Result<(Vec<f64>, Vec<f64>)> {
    let ht = ht_total(data).into_values();
    let robust = match spec {
        EstimatorSpec::Ht => ht.clone(),
        _ => spec.estimate(data)?.curve.into_values(),
    };
    Ok((robust, ht))
}

/// One resample of the with-replication pseudo-population bootstrap.
///
/// Within each stratum every sampled unit is copied `⌊N_h/n_h⌋` times and
/// the pseudo-population is completed to `N_h` units by a simple random
/// sample of the remainder size from the stratum's sample; a sample of the
/// original size is then drawn without replacement.
pub fn gross_resample(data: &SampleData, seed: u64) -> Result<SampleData> {
    let mut rng = rng::rng(seed);
    let mut rows = Vec::with_capacity(data.len());
    let mut stratum = Vec::with_capacity(data.len());
    for (h, sizes) in data.strata.iter().enumerate() {
        let members = data.rows_in(h);
        if members.is_empty() {
            continue;
        }
        let copies = sizes.population / members.len();
        let rest = sizes.population - copies * members.len();
        let mut pseudo: Vec<usize> = Vec::with_capacity(sizes.population);
        for _ in 0..copies {
            pseudo.extend_from_slice(members);
        }
        for pick in sample_indices(&mut rng, members.len(), rest) {
            pseudo.push(members[pick]);
        }
        let mut chosen = sample_indices(&mut rng, pseudo.len(), members.len()).into_vec();
        chosen.sort_unstable();
        for c in chosen {
            rows.push(pseudo[c]);
            stratum.push(h);
        }
    }
    let mut values = Array2::zeros((rows.len(), data.dim()));
    for (k, &r) in rows.iter().enumerate() {
        values.row_mut(k).assign(&data.values.row(r));
    }
    let weights = stratum.iter().map(|&h| data.strata[h].design_weight()).collect();
    let units = rows.iter().map(|&r| data.units[r]).collect();
    SampleData::from_parts(data.grid.clone(), units, values, weights, stratum, data.strata.clone())
}

/// Pseudo-population bootstrap MSE with `replicates` resamples.
pub fn gross_bootstrap(spec: &EstimatorSpec, data: &SampleData, replicates: usize, seed: u64) -> Result<MseReport> {
    if replicates < 2 {
        return Err(Error::TooFewReplicates(replicates));
    }
    let reps = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let resample = gross_resample(data, rng::derive_seed(seed, domain::GROSS, b as u64))?;
            run_replicate(spec, &resample)
        })
        .collect::<Result<Vec<_>>>()?;
    replicate_report(MseMethod::GrossBootstrap, spec, data, reps)
}

/// Replicate weights `w*_i` with mean `1/N`, variance `(1 - π_i)/N²` and
/// covariance `(1 - π_i π_j / π_ij)/N²`.
///
/// Within a stratum that covariance is `c_h (I - J/n_h)` with
/// `c_h = (1 - f_h) n_h / ((n_h - 1) N²)`, whose square root is
/// `√c_h (I - J/n_h)`; strata are independent.
pub fn generalized_weights(data: &SampleData, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng::rng(seed);
    let bign = data.population_size as f64;
    let mut w = vec![1.0 / bign; data.len()];
    for (h, sizes) in data.strata.iter().enumerate() {
        let rows = data.rows_in(h);
        if rows.is_empty() {
            continue;
        }
        let nh = rows.len() as f64;
        if rows.len() < 2 {
            if sizes.sample == sizes.population {
                continue;
            }
            return Err(Error::DegenerateStratum {
                stratum: h + 1,
                size: rows.len(),
            });
        }
        let c = (1.0 - nh / sizes.population as f64) * nh / ((nh - 1.0) * bign * bign);
        if c < 0.0 || !c.is_finite() {
            return Err(Error::Covariance(format!("stratum {} has negative weight variance", h + 1)));
        }
        let z: Vec<f64> = rows.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
        let zbar = z.iter().sum::<f64>() / nh;
        for (&r, zi) in rows.iter().zip(&z) {
            w[r] += c.sqrt() * (zi - zbar);
        }
    }
    Ok(w)
}

/// Generalized (weight-replication) bootstrap MSE: each replicate keeps the
/// sample and re-runs the estimator with analysis weights `N w*_i d_i`.
pub fn generalized_bootstrap(spec: &EstimatorSpec, data: &SampleData, replicates: usize, seed: u64) -> Result<MseReport> {
    if replicates < 2 {
        return Err(Error::TooFewReplicates(replicates));
    }
    let bign = data.population_size as f64;
    let reps = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let w = generalized_weights(data, rng::derive_seed(seed, domain::GENBOOT, b as u64))?;
            let weights = w
                .iter()
                .enumerate()
                .map(|(r, wi)| bign * wi * data.design_weight(r))
                .collect();
            run_replicate(spec, &data.with_weights(weights))
        })
        .collect::<Result<Vec<_>>>()?;
    replicate_report(MseMethod::GeneralizedBootstrap, spec, data, reps)
}

/// Dispatches on the method; `replicates` and `seed` are ignored by
/// linearization.
pub fn estimate_mse(
    method: MseMethod,
    spec: &EstimatorSpec,
    data: &SampleData,
    replicates: usize,
    seed: u64,
) -> Result<MseReport> {
    match method {
        MseMethod::Linearization => mse_linearized(spec, data),
        MseMethod::GrossBootstrap => gross_bootstrap(spec, data, replicates, seed),
        MseMethod::GeneralizedBootstrap => generalized_bootstrap(spec, data, replicates, seed),
    }
}
