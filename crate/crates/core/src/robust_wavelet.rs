//! Robust estimator in an orthonormal wavelet basis: each curve is expanded
//! by a periodized discrete wavelet transform, the coefficient totals are
//! robustified one at a time and the result is transformed back.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::{Curve, TimeGrid};
use crate::error::{Error, Result};
use crate::ht_estimator::{conditional_biases_of, weighted_column_sums};
use crate::robust_pointwise::{tune_columns, EstimatorKind, RobustTotalEstimate, Tuning};
use crate::sampling::SampleData;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Least-asymmetric Daubechies filter with 10 vanishing moments,
/// reconstruction low-pass taps.
const SYM10: [f64; 20] = [
    -0.0004593294210046588,
    5.7036083618494284e-05,
    0.004593173585311828,
    -0.0008043589320165449,
    -0.02035493981231129,
    0.005764912033581909,
    0.04999497207737669,
    -0.0319900568824278,
    -0.03553674047381755,
    0.38382676106708546,
    0.7695100370211071,
    0.47169066693843925,
    -0.07088053578324385,
    -0.15949427888491757,
    0.011609893903711381,
    0.0459272392310922,
    -0.0014653825813050513,
    -0.008641299277022422,
    9.563267072289475e-05,
    0.0007701598091144901,
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    Haar,
    #[default]
    Symlet10,
}

impl WaveletFamily {
    pub fn lowpass(&self) -> Vec<f64> {
        match self {
            WaveletFamily::Haar => vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2],
            WaveletFamily::Symlet10 => SYM10.to_vec(),
        }
    }
}

impl fmt::Display for WaveletFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WaveletFamily::Haar => f.write_str("haar"),
            WaveletFamily::Symlet10 => f.write_str("symlet10"),
        }
    }
}

impl FromStr for WaveletFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "haar" => Ok(WaveletFamily::Haar),
            "symlet10" | "sym10" | "la20" => Ok(WaveletFamily::Symlet10),
            other => Err(Error::Config(format!("unknown wavelet family {other:?}"))),
        }
    }
}

/// Periodized orthonormal wavelet basis on a grid of `len` points padded
/// circularly to the next power of two and decomposed to full depth.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBasis {
    pub family: WaveletFamily,
    len: usize,
    padded: usize,
    levels: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl WaveletBasis {
    pub fn new(family: WaveletFamily, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Dimension("cannot build a wavelet basis on zero points".into()));
        }
        let padded = len.next_power_of_two();
        let lo = family.lowpass();
        let l = lo.len();
        let hi = (0..l)
            .map(|n| if n % 2 == 0 { lo[l - 1 - n] } else { -lo[l - 1 - n] })
            .collect();
        Ok(WaveletBasis {
            family,
            len,
            padded,
            levels: padded.trailing_zeros() as usize,
            lo,
            hi,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn padded_length(&self) -> usize {
        self.padded
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn lowpass(&self) -> &[f64] {
        &self.lo
    }

    pub fn highpass(&self) -> &[f64] {
        &self.hi
    }

    fn pad_before(&self) -> usize {
        (self.padded - self.len) / 2
    }

    /// Circular extension to the padded length.
    pub fn pad(&self, values: &[f64]) -> Vec<f64> {
        let before = self.pad_before();
        (0..self.padded)
            .map(|p| values[(p + self.len - before % self.len) % self.len])
            .collect()
    }

    /// Coefficients ordered coarse to fine: the scaling coefficient, then
    /// detail levels of length 1, 2, 4, ..., `P / 2`.
    pub fn dwt(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.len {
            return Err(Error::Dimension(format!(
                "curve has {} points, basis expects {}",
                values.len(),
                self.len
            )));
        }
        let mut out = self.pad(values);
        let mut scratch = vec![0.0; self.padded];
        let mut m = self.padded;
        while m > 1 {
            let half = m / 2;
            for k in 0..half {
                let (mut a, mut d) = (0.0, 0.0);
                for (n, (h, g)) in self.lo.iter().zip(&self.hi).enumerate() {
                    let x = out[(2 * k + n) % m];
                    a += h * x;
                    d += g * x;
                }
                scratch[k] = a;
                scratch[half + k] = d;
            }
            out[..m].copy_from_slice(&scratch[..m]);
            m = half;
        }
        Ok(out)
    }

    /// Inverse transform followed by removal of the padding.
    pub fn idwt(&self, coefs: &[f64]) -> Result<Vec<f64>> {
        if coefs.len() != self.padded {
            return Err(Error::Dimension(format!(
                "{} coefficients, basis expects {}",
                coefs.len(),
                self.padded
            )));
        }
        let mut out = coefs.to_vec();
        let mut scratch = vec![0.0; self.padded];
        let mut m = 2;
        while m <= self.padded {
            let half = m / 2;
            scratch[..m].iter_mut().for_each(|s| *s = 0.0);
            for k in 0..half {
                let (a, d) = (out[k], out[half + k]);
                for (n, (h, g)) in self.lo.iter().zip(&self.hi).enumerate() {
                    scratch[(2 * k + n) % m] += h * a + g * d;
                }
            }
            out[..m].copy_from_slice(&scratch[..m]);
            m *= 2;
        }
        let before = self.pad_before();
        Ok(out[before..before + self.len].to_vec())
    }
}

/// Wavelet coefficients of the sampled curves with their totals.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefTable {
    /// `n × P`, one row of coefficients per sampled unit.
    pub coefs: Array2<f64>,
    pub totals: Vec<f64>,
    pub robust_totals: Vec<f64>,
    /// Conditional biases of the coefficient totals, `n × P`.
    pub biases: Array2<f64>,
    pub constants: Vec<f64>,
}

impl CoefTable {
    /// With `tuning = None` nothing is truncated.
    pub fn compute(data: &SampleData, basis: &WaveletBasis, tuning: Option<Tuning>) -> Result<Self> {
        if basis.len() != data.dim() {
            return Err(Error::Dimension(format!(
                "basis built for {} points, curves have {}",
                basis.len(),
                data.dim()
            )));
        }
        let rows: Vec<Vec<f64>> = (0..data.len())
            .into_par_iter()
            .map(|r| basis.dwt(&data.row(r).to_vec()))
            .collect::<Result<_>>()?;
        let p = basis.padded_length();
        let coefs = Array2::from_shape_vec((data.len(), p), rows.concat()).expect("rows of equal length");
        let totals = weighted_column_sums(coefs.view(), &data.weights);
        let biases = conditional_biases_of(coefs.view(), data)?;
        let (constants, deltas) = match tuning {
            Some(t) => tune_columns(biases.view(), t)?,
            None => (vec![f64::INFINITY; p], vec![0.0; p]),
        };
        let robust_totals = totals.iter().zip(&deltas).map(|(t, d)| t + d).collect();
        Ok(CoefTable {
            coefs,
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

/// `t̂^{R3} = Σ_q t̂^{R}_{a_q} φ_q`.
pub fn r3_from_table(grid: &Arc<TimeGrid>, basis: &WaveletBasis, table: &CoefTable, tuning: Tuning) -> Result<RobustTotalEstimate> {
    let values = basis.idwt(&table.robust_totals)?;
    Ok(RobustTotalEstimate {
        curve: Curve::new(values, grid.clone())?,
        kind: EstimatorKind::R3,
        tuning,
        constants: table.constants.clone(),
        delta: table.deltas(),
    })
}

pub fn r3_estimate(data: &SampleData, family: WaveletFamily, tuning: Option<Tuning>) -> Result<RobustTotalEstimate> {
    let basis = WaveletBasis::new(family, data.dim())?;
    let table = CoefTable::compute(data, &basis, tuning)?;
    r3_from_table(&data.grid, &basis, &table, tuning.unwrap_or_default())
}
