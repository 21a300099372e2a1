//! Robust estimation of totals of curves observed on a probability sample.

pub mod curves;
pub mod error;
pub mod mse;
pub mod estimator;
pub mod ht_estimator;
pub mod population_io;
pub mod robust_depth;
pub mod robust_pointwise;
pub mod robust_spca;
pub mod robust_wavelet;
pub mod rng;
pub mod sampling;
pub mod simulation;

pub use curves::{population_mean, population_total, Curve, CurvePopulation, Quadrature, TimeGrid};
pub use error::{Error, Result};
pub use sampling::{Design, SampleData, SampleDraw};
