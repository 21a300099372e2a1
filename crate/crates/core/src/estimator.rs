//! A single description of every total estimator, so that simulations and
//! resampling methods can re-run any of them on new samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ht_estimator::{conditional_bias_estimated, ht_total};
use crate::robust_depth::{r4_estimate, DEFAULT_WINDOW};
use crate::robust_pointwise::{r1_estimate, EstimatorKind, RobustTotalEstimate, Tuning};
use crate::robust_spca::{r2_estimate, SpcaConfig};
use crate::robust_wavelet::{r3_estimate, WaveletFamily};
use crate::sampling::SampleData;

/// Estimator with all its settings.
///
/// The string form is `ht`, `r1-<tuning>`, `r2-<tuning>[-k<K>]`,
/// `r3-<tuning>[-haar|-symlet10]` or `r4-<tuning>[-w<window>]`, where
/// `<tuning>` is `minimax` or `q<q>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EstimatorSpec {
    Ht,
    R1 { tuning: Tuning },
    R2 { tuning: Tuning, spca: SpcaConfig },
    R3 { tuning: Tuning, wavelet: WaveletFamily },
    R4 { tuning: Tuning, window: usize },
}

impl EstimatorSpec {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            EstimatorSpec::Ht => EstimatorKind::Ht,
            EstimatorSpec::R1 { .. } => EstimatorKind::R1,
            EstimatorSpec::R2 { .. } => EstimatorKind::R2,
            EstimatorSpec::R3 { .. } => EstimatorKind::R3,
            EstimatorSpec::R4 { .. } => EstimatorKind::R4,
        }
    }

    pub fn tuning(&self) -> Option<Tuning> {
        match self {
            EstimatorSpec::Ht => None,
            EstimatorSpec::R1 { tuning }
            | EstimatorSpec::R2 { tuning, .. }
            | EstimatorSpec::R3 { tuning, .. }
            | EstimatorSpec::R4 { tuning, .. } => Some(*tuning),
        }
    }

    pub fn estimate(&self, data: &SampleData) -> Result<RobustTotalEstimate> {
        match self {
            EstimatorSpec::Ht => Ok(RobustTotalEstimate {
                curve: ht_total(data),
                kind: EstimatorKind::Ht,
                tuning: Tuning::Minimax,
                constants: Vec::new(),
                delta: vec![0.0; data.dim()],
            }),
            EstimatorSpec::R1 { tuning } => {
                let biases = conditional_bias_estimated(data)?;
                r1_estimate(&ht_total(data), &biases, *tuning)
            }
            EstimatorSpec::R2 { tuning, spca } => r2_estimate(data, spca, Some(*tuning)),
            EstimatorSpec::R3 { tuning, wavelet } => r3_estimate(data, *wavelet, Some(*tuning)),
            EstimatorSpec::R4 { tuning, window } => {
                let biases = conditional_bias_estimated(data)?;
                r4_estimate(&ht_total(data), &biases, *tuning, *window)
            }
        }
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorSpec::Ht => f.write_str("ht"),
            EstimatorSpec::R1 { tuning } => write!(f, "r1-{tuning}"),
            EstimatorSpec::R2 { tuning, spca } => {
                write!(f, "r2-{tuning}")?;
                if spca.k != SpcaConfig::default().k {
                    write!(f, "-k{}", spca.k)?;
                }
                Ok(())
            }
            EstimatorSpec::R3 { tuning, wavelet } => {
                write!(f, "r3-{tuning}")?;
                if *wavelet != WaveletFamily::default() {
                    write!(f, "-{wavelet}")?;
                }
                Ok(())
            }
            EstimatorSpec::R4 { tuning, window } => {
                write!(f, "r4-{tuning}")?;
                if *window != DEFAULT_WINDOW {
                    write!(f, "-w{window}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for EstimatorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let mut parts = lower.split('-');
        let head = parts.next().unwrap_or_default();
        if head == "ht" {
            return match parts.next() {
                None => Ok(EstimatorSpec::Ht),
                Some(extra) => Err(Error::Config(format!("unexpected {extra:?} after ht"))),
            };
        }
        let tuning: Tuning = parts.next().unwrap_or("minimax").parse()?;
        let option = parts.next();
        if let Some(extra) = parts.next() {
            return Err(Error::Config(format!("unexpected {extra:?} in estimator {s:?}")));
        }
        let bad = |o: &str| Error::Config(format!("unknown option {o:?} for {head}"));
        match head {
            "r1" => match option {
                None => Ok(EstimatorSpec::R1 { tuning }),
                Some(o) => Err(bad(o)),
            },
            "r2" => {
                let mut spca = SpcaConfig::default();
                if let Some(o) = option {
                    spca.k = o.strip_prefix('k').and_then(|k| k.parse().ok()).ok_or_else(|| bad(o))?;
                }
                Ok(EstimatorSpec::R2 { tuning, spca })
            }
            "r3" => {
                let wavelet = option.map_or(Ok(WaveletFamily::default()), str::parse)?;
                Ok(EstimatorSpec::R3 { tuning, wavelet })
            }
            "r4" => {
                let window = match option {
                    None => DEFAULT_WINDOW,
                    Some(o) => o.strip_prefix('w').and_then(|w| w.parse().ok()).ok_or_else(|| bad(o))?,
                };
                Ok(EstimatorSpec::R4 { tuning, window })
            }
            other => Err(Error::Config(format!("unknown estimator {other:?}"))),
        }
    }
}

impl TryFrom<String> for EstimatorSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EstimatorSpec> for String {
    fn from(e: EstimatorSpec) -> String {
        e.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for label in [
            "ht",
            "r1-minimax",
            "r1-q4",
            "r1-q10",
            "r2-minimax",
            "r2-q4-k3",
            "r3-minimax",
            "r3-minimax-haar",
            "r4-minimax",
            "r4-q4-w3",
        ] {
            let spec: EstimatorSpec = label.parse().unwrap();
            assert_eq!(spec.to_string(), label);
        }
        assert_eq!("r1".parse::<EstimatorSpec>().unwrap(), EstimatorSpec::R1 { tuning: Tuning::Minimax });
        for bad in ["r5", "ht-q4", "r1-minimax-haar", "r2-minimax-x", "r4-q1", "r3-minimax-db4"] {
            assert!(bad.parse::<EstimatorSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn serde_uses_labels() {
        let spec: EstimatorSpec = "r3-q10-haar".parse().unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, "\"r3-q10-haar\"");
        assert_eq!(serde_json::from_str::<EstimatorSpec>(&json).unwrap(), spec);
    }
}
