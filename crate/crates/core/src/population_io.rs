//! Reading and writing curve populations, the synthetic load-curve
//! generator, and strata-jumper contamination.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curves::{CurvePopulation, Quadrature, TimeGrid};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

const STRATUM_COLUMN: &str = "stratum";
const AUX_COLUMN: &str = "aux";

pub fn load_population(path: impl AsRef<Path>, quadrature: Quadrature) -> Result<CurvePopulation> {
    read_population(File::open(path)?, quadrature)
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "NaN" | "nan" | "null")
}

/// Parses the CSV layout `t_1,...,t_D[,stratum][,aux]`; one row per unit.
pub fn read_population<R: Read>(reader: R, quadrature: Quadrature) -> Result<CurvePopulation> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let stratum_col = headers.iter().position(|h| h == STRATUM_COLUMN);
    let aux_col = headers.iter().position(|h| h == AUX_COLUMN);
    let value_cols: Vec<usize> = (0..headers.len())
        .filter(|c| Some(*c) != stratum_col && Some(*c) != aux_col)
        .collect();
    let d = value_cols.len();
    if d < 2 {
        return Err(Error::Format {
            line: 1,
            message: format!("need at least 2 curve columns, found {d}"),
        });
    }

    let mut values = Vec::new();
    let mut strata = stratum_col.map(|_| Vec::new());
    let mut aux = aux_col.map(|_| Vec::new());
    let mut rows = 0;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(Error::Format {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let parse = |column: usize| -> Result<f64> {
            let cell = &record[column];
            if is_missing(cell) {
                return Err(Error::MissingData {
                    line,
                    column: column + 1,
                });
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    line,
                    column: column + 1,
                    cell: cell.to_string(),
                }),
            }
        };
        for &c in &value_cols {
            values.push(parse(c)?);
        }
        if let (Some(c), Some(labels)) = (stratum_col, strata.as_mut()) {
            let cell = &record[c];
            if is_missing(cell) {
                return Err(Error::MissingData { line, column: c + 1 });
            }
            let label = cell.parse::<usize>().map_err(|_| Error::Parse {
                line,
                column: c + 1,
                cell: cell.to_string(),
            })?;
            labels.push(label);
        }
        if let (Some(c), Some(a)) = (aux_col, aux.as_mut()) {
            a.push(parse(c)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Format {
            line: 1,
            message: "no data rows".into(),
        });
    }
    let grid = Arc::new(TimeGrid::uniform(d, quadrature)?);
    let values = Array2::from_shape_vec((rows, d), values)
        .map_err(|e| Error::InvalidPopulation(e.to_string()))?;
    CurvePopulation::new(grid, values, strata, aux)
}

/// Writes the population in the layout read by [`read_population`]. Floats
/// use the shortest representation that parses back to the same bits.
pub fn write_population<W: Write>(pop: &CurvePopulation, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let d = pop.grid().len();
    let mut header: Vec<String> = (1..=d).map(|k| format!("t_{k}")).collect();
    if pop.strata().is_some() {
        header.push(STRATUM_COLUMN.into());
    }
    if pop.auxiliary().is_some() {
        header.push(AUX_COLUMN.into());
    }
    wtr.write_record(&header)?;
    let mut fields = Vec::with_capacity(header.len());
    for i in 0..pop.size() {
        fields.clear();
        fields.extend(pop.row(i).iter().map(|v| v.to_string()));
        if let Some(s) = pop.strata() {
            fields.push(s[i].to_string());
        }
        if let Some(a) = pop.auxiliary() {
            fields.push(a[i].to_string());
        }
        wtr.write_record(&fields)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_population(pop: &CurvePopulation, path: impl AsRef<Path>) -> Result<()> {
    write_population(pop, File::create(path)?)
}

/// Parameters of the synthetic skewed load-curve population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_pop: usize,
    pub d: usize,
    pub n_strata: usize,
    /// Grid points per daily cycle.
    pub daily_period: usize,
    pub outlier_fraction: f64,
    pub outlier_scale: f64,
    pub seed: u64,
    /// Log-scale standard deviation of the per-unit consumption level.
    pub level_sigma: f64,
    /// Relative amplitude of the daily profile, in `[0, 1)`.
    pub amplitude: f64,
    /// Log-scale standard deviation of the pointwise multiplicative noise.
    pub noise: f64,
    /// Log-scale noise linking this period's level to the auxiliary total.
    pub aux_noise: f64,
    pub baseline: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_pop: 2000,
            d: 48,
            n_strata: 5,
            daily_period: 48,
            outlier_fraction: 0.02,
            outlier_scale: 8.0,
            seed: 1,
            level_sigma: 0.7,
            amplitude: 0.6,
            noise: 0.25,
            aux_noise: 0.3,
            baseline: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Spec(m.to_string()));
        if self.n_pop < 10 {
            return fail("population size must be at least 10");
        }
        if self.d < 8 {
            return fail("grid length must be at least 8");
        }
        if !(0.0..0.5).contains(&self.outlier_fraction) {
            return fail("outlier fraction must lie in [0, 0.5)");
        }
        if !(self.outlier_scale >= 1.0 && self.outlier_scale.is_finite()) {
            return fail("outlier scale must be at least 1");
        }
        if self.n_strata == 0 || self.n_strata > self.n_pop {
            return fail("number of strata must lie in [1, N]");
        }
        if self.daily_period < 2 {
            return fail("daily period must be at least 2 points");
        }
        if !(0.0..1.0).contains(&self.amplitude) {
            return fail("amplitude must lie in [0, 1)");
        }
        if [self.level_sigma, self.noise, self.aux_noise]
            .iter()
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return fail("noise scales must be finite and nonnegative");
        }
        if !(self.baseline > 0.0 && self.baseline.is_finite()) {
            return fail("baseline must be positive");
        }
        Ok(())
    }
}

/// Generates a positive, right-skewed population of daily-periodic curves.
///
/// Each unit gets a log-normal level, a phase-shifted sinusoidal daily
/// profile and multiplicative log-normal noise. A fraction of units has its
/// level multiplied by `outlier_scale`. The auxiliary scalar is a noisy
/// prior-period total, and strata are its `H` equal-count quantile groups.
pub fn generate_population(spec: &SyntheticSpec) -> Result<CurvePopulation> {
    spec.validate()?;
    let (n, d) = (spec.n_pop, spec.d);
    let mut rng = rng::rng(spec.seed);
    let mut levels = Vec::with_capacity(n);
    let mut phases = Vec::with_capacity(n);
    let mut amps = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        levels.push((spec.level_sigma * z).exp());
        phases.push(rng.random_range(0.0..0.25 * TAU));
        amps.push(spec.amplitude * rng.random_range(0.5..1.0));
    }
    let n_out = (spec.outlier_fraction * n as f64).round() as usize;
    let mut pick = rng::rng(rng::derive_seed(spec.seed, domain::OUTLIERS, 0));
    for i in sample(&mut pick, n, n_out) {
        levels[i] *= spec.outlier_scale;
    }

    let mut values = Array2::zeros((n, d));
    for (i, mut row) in values.rows_mut().into_iter().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            let angle = TAU * k as f64 / spec.daily_period as f64 + phases[i];
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v = spec.baseline * levels[i] * (1.0 + amps[i] * angle.sin()) * (spec.noise * eps).exp();
        }
    }
    let aux: Vec<f64> = levels
        .iter()
        .map(|l| {
            let eta: f64 = StandardNormal.sample(&mut rng);
            spec.baseline * d as f64 * l * (spec.aux_noise * eta).exp()
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| aux[a].total_cmp(&aux[b]).then(a.cmp(&b)));
    let mut strata = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        strata[i] = rank * spec.n_strata / n + 1;
    }

    let grid = Arc::new(TimeGrid::uniform(d, Quadrature::default())?);
    CurvePopulation::new(grid, values, Some(strata), Some(aux))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumperSpec {
    /// Fraction of units moved to a wrong stratum.
    pub rate: f64,
    pub seed: u64,
}

/// Moves `round(rate * N)` units, chosen uniformly without replacement, to a
/// stratum drawn uniformly among the `H - 1` others. Curves are untouched.
pub fn apply_strata_jumpers(pop: &CurvePopulation, spec: &JumperSpec) -> Result<CurvePopulation> {
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(Error::Spec(format!("jumper rate {} outside [0, 1]", spec.rate)));
    }
    let labels = pop.strata().ok_or(Error::NotEnoughStrata(1))?;
    let h = pop.stratum_count();
    if h < 2 {
        return Err(Error::NotEnoughStrata(h));
    }
    let n = pop.size();
    let count = (spec.rate * n as f64).round() as usize;
    let mut rng = rng::rng(rng::derive_seed(spec.seed, domain::JUMPERS, 0));
    let mut new_labels = labels.to_vec();
    let mut movers = sample(&mut rng, n, count).into_vec();
    movers.sort_unstable();
    for i in movers {
        let old = labels[i];
        let k = rng.random_range(1..h);
        new_labels[i] = if k < old { k } else { k + 1 };
    }
    pop.clone().with_strata(new_labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_plain_csv() {
        let csv = "t_1,t_2,t_3,t_4\n1,2,3,4\n5,6,7,8\n0.5,1e-3,-2,3.25\n";
        let pop = read_population(csv.as_bytes(), Quadrature::Unit).unwrap();
        assert_eq!(pop.size(), 3);
        assert_eq!(pop.grid().len(), 4);
        assert_eq!(pop.row(2).to_vec(), vec![0.5, 1e-3, -2.0, 3.25]);
        assert!(pop.strata().is_none());
    }

    #[test]
    fn missing_cell_is_rejected() {
        let csv = "t_1,t_2,t_3\n1,2,3\n4,,6\n";
        let err = read_population(csv.as_bytes(), Quadrature::Unit).unwrap_err();
        assert!(matches!(err, Error::MissingData { line: 3, column: 2 }), "{err:?}");
    }

    #[test]
    fn ragged_and_garbage_rows() {
        let ragged = "t_1,t_2,t_3\n1,2,3\n4,5\n";
        assert!(matches!(
            read_population(ragged.as_bytes(), Quadrature::Unit),
            Err(Error::Format { .. })
        ));
        let garbage = "t_1,t_2\n1,abc\n";
        assert!(matches!(
            read_population(garbage.as_bytes(), Quadrature::Unit),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn stratum_column_counts() {
        let csv = "t_1,t_2,stratum,aux\n1,2,1,10\n3,4,1,11\n5,6,2,30\n";
        let pop = read_population(csv.as_bytes(), Quadrature::Unit).unwrap();
        assert_eq!(pop.stratum_count(), 2);
        assert_eq!(pop.stratum_sizes(), vec![2, 1]);
        assert_eq!(pop.auxiliary().unwrap(), &[10.0, 11.0, 30.0]);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let spec = SyntheticSpec {
            n_pop: 60,
            d: 12,
            seed: 3,
            ..Default::default()
        };
        let pop = generate_population(&spec).unwrap();
        let mut buf = Vec::new();
        write_population(&pop, &mut buf).unwrap();
        let back = read_population(buf.as_slice(), Quadrature::Trapezoid).unwrap();
        assert_eq!(back, pop);
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SyntheticSpec {
            n_pop: 100,
            d: 16,
            seed: 11,
            ..Default::default()
        };
        let a = generate_population(&spec).unwrap();
        let b = generate_population(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_population(&SyntheticSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generator_shape_and_strata() {
        let spec = SyntheticSpec {
            n_pop: 103,
            d: 24,
            n_strata: 5,
            ..Default::default()
        };
        let pop = generate_population(&spec).unwrap();
        assert!(pop.values().iter().all(|v| *v > 0.0));
        let sizes = pop.stratum_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 103);
        assert!(sizes.iter().all(|s| (20..=21).contains(s)), "{sizes:?}");
        let aux = pop.auxiliary().unwrap();
        let labels = pop.strata().unwrap();
        // quantile strata: every unit of stratum h has aux below every unit of h + 1
        for h in 1..5 {
            let hi = (0..103).filter(|&i| labels[i] == h).map(|i| aux[i]).fold(f64::MIN, f64::max);
            let lo = (0..103).filter(|&i| labels[i] == h + 1).map(|i| aux[i]).fold(f64::MAX, f64::min);
            assert!(hi <= lo);
        }
    }

    fn totals(pop: &CurvePopulation) -> Vec<f64> {
        pop.values().rows().into_iter().map(|r| r.sum()).collect()
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn clean_population_spread_is_bounded_by_level_spread() {
        let spec = SyntheticSpec {
            n_pop: 500,
            d: 48,
            outlier_fraction: 0.0,
            seed: 5,
            ..Default::default()
        };
        let pop = generate_population(&spec).unwrap();
        let t = totals(&pop);
        let ratio = t.iter().cloned().fold(0.0, f64::max) / median(t);
        // 5 standard deviations of the log-level, amplitude and noise slack
        let bound = (5.0 * spec.level_sigma).exp() * (1.0 + spec.amplitude) / (1.0 - spec.amplitude) * 1.5;
        assert!(ratio < bound, "ratio {ratio} bound {bound}");

        let contaminated = generate_population(&SyntheticSpec {
            outlier_fraction: 0.05,
            outlier_scale: 20.0,
            ..spec.clone()
        })
        .unwrap();
        let t = totals(&contaminated);
        assert!(t.iter().cloned().fold(0.0, f64::max) / median(t) > ratio);
    }

    #[test]
    fn unit_outlier_scale_changes_nothing() {
        let base = SyntheticSpec {
            n_pop: 80,
            d: 10,
            outlier_fraction: 0.0,
            ..Default::default()
        };
        let scaled = SyntheticSpec {
            outlier_fraction: 0.2,
            outlier_scale: 1.0,
            ..base.clone()
        };
        let a = generate_population(&base).unwrap();
        let b = generate_population(&scaled).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticSpec { n_pop: 5, ..Default::default() },
            SyntheticSpec { d: 4, ..Default::default() },
            SyntheticSpec { outlier_fraction: 0.5, ..Default::default() },
            SyntheticSpec { outlier_scale: 0.5, ..Default::default() },
        ] {
            assert!(matches!(generate_population(&spec), Err(Error::Spec(_))));
        }
    }

    fn small_pop(n: usize, h: usize) -> CurvePopulation {
        let spec = SyntheticSpec {
            n_pop: n,
            d: 8,
            n_strata: h,
            ..Default::default()
        };
        generate_population(&spec).unwrap()
    }

    #[test]
    fn jumpers_zero_rate_is_identity() {
        let pop = small_pop(50, 3);
        let out = apply_strata_jumpers(&pop, &JumperSpec { rate: 0.0, seed: 1 }).unwrap();
        assert_eq!(out, pop);
    }

    #[test]
    fn jumpers_full_rate_with_two_strata_flips_everything() {
        let pop = small_pop(40, 2);
        let out = apply_strata_jumpers(&pop, &JumperSpec { rate: 1.0, seed: 9 }).unwrap();
        for (a, b) in pop.strata().unwrap().iter().zip(out.strata().unwrap()) {
            assert_eq!(*a + *b, 3);
        }
    }

    #[test]
    fn jumpers_move_exact_count() {
        let pop = small_pop(100, 5);
        let out = apply_strata_jumpers(&pop, &JumperSpec { rate: 0.1, seed: 4 }).unwrap();
        let moved = pop
            .strata()
            .unwrap()
            .iter()
            .zip(out.strata().unwrap())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(moved, 10);
        assert_eq!(out.values(), pop.values());
        assert_eq!(out.stratum_sizes().iter().sum::<usize>(), 100);
    }

    #[test]
    fn jumpers_need_two_strata() {
        let pop = small_pop(30, 1);
        assert!(matches!(
            apply_strata_jumpers(&pop, &JumperSpec { rate: 0.1, seed: 1 }),
            Err(Error::NotEnoughStrata(1))
        ));
    }
}
