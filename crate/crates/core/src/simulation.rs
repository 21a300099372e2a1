//! Monte Carlo comparison of the total estimators: relative bias and
//! relative MSE against HT, pointwise and averaged over time.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::{population_total, CurvePopulation, Quadrature};
use crate::error::{Error, Result};
use crate::estimator::EstimatorSpec;
use crate::ht_estimator::ht_total;
use crate::population_io::{apply_strata_jumpers, generate_population, load_population, JumperSpec, SyntheticSpec};
use crate::rng::{self, domain};
use crate::sampling::{allocate, AllocationRule, Design, SampleData, SampleDraw};

/// Largest population for which enumeration mode is allowed.
pub const MAX_ENUMERATION_SIZE: usize = 8;

/// Sampling design of a scenario. Stratified designs carry the percentage of
/// strata jumpers; the string forms are `srs` and `str-j<percent>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DesignSpec {
    Srs,
    Stratified { jumper_percent: u32 },
}

impl fmt::Display for DesignSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DesignSpec::Srs => f.write_str("srs"),
            DesignSpec::Stratified { jumper_percent } => write!(f, "str-j{jumper_percent}"),
        }
    }
}

impl FromStr for DesignSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "srs" {
            return Ok(DesignSpec::Srs);
        }
        if s == "str" {
            return Ok(DesignSpec::Stratified { jumper_percent: 0 });
        }
        s.strip_prefix("str-j")
            .and_then(|p| p.parse::<u32>().ok())
            .filter(|p| *p <= 100)
            .map(|jumper_percent| DesignSpec::Stratified { jumper_percent })
            .ok_or_else(|| Error::Config(format!("unknown design {s:?}")))
    }
}

impl TryFrom<String> for DesignSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DesignSpec> for String {
    fn from(d: DesignSpec) -> String {
        d.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub design: DesignSpec,
    pub n: usize,
    pub estimators: Vec<EstimatorSpec>,
    pub replicates: usize,
    pub seed: u64,
    pub allocation: AllocationRule,
    /// Average over every possible sample instead of random draws.
    pub enumerate: bool,
}

impl Scenario {
    pub fn new(design: DesignSpec, n: usize, estimators: Vec<EstimatorSpec>, replicates: usize, seed: u64) -> Self {
        Scenario {
            design,
            n,
            estimators,
            replicates,
            seed,
            allocation: AllocationRule::Neyman,
            enumerate: false,
        }
    }

    pub fn label(&self) -> String {
        format!("{}-n{}", self.design, self.n)
    }

    /// Sampling design on the population, with jumpers applied to the frame.
    ///
    /// The allocation is computed on the frame as sampled, jumpers included.
    pub fn build_design(&self, pop: &CurvePopulation) -> Result<Design> {
        match self.design {
            DesignSpec::Srs => Design::srs(pop.size(), self.n),
            DesignSpec::Stratified { jumper_percent: 0 } => allocate(pop, self.n, &self.allocation),
            DesignSpec::Stratified { jumper_percent } => {
                let jumped = apply_strata_jumpers(
                    pop,
                    &JumperSpec {
                        rate: jumper_percent as f64 / 100.0,
                        seed: self.seed,
                    },
                )?;
                allocate(&jumped, self.n, &self.allocation)
            }
        }
    }
}

/// One point of an estimator's time-resolved series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub index: usize,
    pub time: f64,
    /// Relative bias in %, or the absolute bias where the true total is 0.
    pub rb: f64,
    pub rb_defined: bool,
    /// MSE in % of the HT MSE, `None` where the HT MSE is 0.
    pub rmse: Option<f64>,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scenario: String,
    pub estimator: String,
    pub replicates: usize,
    /// Time-averaged relative bias over the points where it is defined.
    pub rb: Option<f64>,
    /// Time-averaged relative MSE over the points where it is defined.
    pub rmse: Option<f64>,
    pub mean_seconds: f64,
    pub series: Vec<SeriesPoint>,
}

impl EvalRow {
    /// Points where the true total vanishes and RB falls back to the bias.
    pub fn rb_undefined(&self) -> Vec<usize> {
        self.series.iter().filter(|p| !p.rb_defined).map(|p| p.index).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn row(&self, scenario: &str, estimator: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.scenario == scenario && r.estimator == estimator)
    }

    pub fn extend(&mut self, other: EvalTable) {
        self.rows.extend(other.rows);
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, count) = values.flatten().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Runs the scenario: draws `replicates` samples (or every sample in
/// enumeration mode), applies every estimator and compares the averages to
/// the true total. HT is always computed for the RMSE denominator.
pub fn run_monte_carlo(pop: &CurvePopulation, scenario: &Scenario) -> Result<EvalTable> {
    let design = scenario.build_design(pop)?;
    let draws: Vec<SampleDraw> = if scenario.enumerate {
        if pop.size() > MAX_ENUMERATION_SIZE {
            return Err(Error::Infeasible(format!(
                "enumeration needs N <= {MAX_ENUMERATION_SIZE}, got {}",
                pop.size()
            )));
        }
        design.enumerate()?
    } else {
        if scenario.replicates < 2 {
            return Err(Error::TooFewReplicates(scenario.replicates));
        }
        Vec::new()
    };
    let count = if scenario.enumerate { draws.len() } else { scenario.replicates };

    let per_replicate = (0..count)
        .into_par_iter()
        .map(|i| {
            let drawn;
            let draw = if scenario.enumerate {
                &draws[i]
            } else {
                drawn = design.draw(rng::derive_seed(scenario.seed, domain::DRAW, i as u64));
                &drawn
            };
            let data = SampleData::new(pop, draw)?;
            let ht = ht_total(&data).into_values();
            let mut results = Vec::with_capacity(scenario.estimators.len());
            for spec in &scenario.estimators {
                let start = Instant::now();
                let values = match spec {
                    EstimatorSpec::Ht => ht.clone(),
                    _ => spec.estimate(&data)?.curve.into_values(),
                };
                results.push((values, start.elapsed().as_secs_f64()));
            }
            Ok((ht, results))
        })
        .collect::<Result<Vec<_>>>()?;

    let total = population_total(pop);
    let truth = total.values();
    let d = truth.len();
    let inv = 1.0 / count as f64;
    let mut ht_mse = vec![0.0; d];
    for (ht, _) in &per_replicate {
        for t in 0..d {
            ht_mse[t] += (ht[t] - truth[t]).powi(2) * inv;
        }
    }

    let label = scenario.label();
    let points = pop.grid().points();
    let mut rows = Vec::with_capacity(scenario.estimators.len());
    for (e, spec) in scenario.estimators.iter().enumerate() {
        let mut mean = vec![0.0; d];
        let mut mse = vec![0.0; d];
        let mut seconds = 0.0;
        for (_, results) in &per_replicate {
            let (values, secs) = &results[e];
            seconds += secs;
            for t in 0..d {
                mean[t] += values[t] * inv;
                mse[t] += (values[t] - truth[t]).powi(2) * inv;
            }
        }
        let series: Vec<SeriesPoint> = (0..d)
            .map(|t| {
                let bias = mean[t] - truth[t];
                let rb_defined = truth[t] != 0.0;
                let rmse = if matches!(spec, EstimatorSpec::Ht) && ht_mse[t] > 0.0 {
                    Some(100.0)
                } else {
                    (ht_mse[t] > 0.0).then(|| 100.0 * mse[t] / ht_mse[t])
                };
                SeriesPoint {
                    index: t,
                    time: points[t],
                    rb: if rb_defined { 100.0 * bias / truth[t] } else { bias },
                    rb_defined,
                    rmse,
                    mse: mse[t],
                }
            })
            .collect();
        rows.push(EvalRow {
            scenario: label.clone(),
            estimator: spec.to_string(),
            replicates: count,
            rb: mean_defined(series.iter().map(|p| p.rb_defined.then_some(p.rb))),
            rmse: mean_defined(series.iter().map(|p| p.rmse)),
            mean_seconds: seconds * inv,
            series,
        });
    }
    Ok(EvalTable { rows })
}

/// Where the population of a simulation comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum PopulationSource {
    Synthetic(SyntheticSpec),
    Csv {
        path: PathBuf,
        #[serde(default)]
        quadrature: Quadrature,
    },
}

impl PopulationSource {
    /// Relative CSV paths are taken from `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<CurvePopulation> {
        match self {
            PopulationSource::Synthetic(spec) => generate_population(spec),
            PopulationSource::Csv { path, quadrature } => {
                let full = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                load_population(full, *quadrature)
            }
        }
    }
}

/// Cartesian grid of scenarios sharing estimators, replicates and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioGrid {
    pub designs: Vec<DesignSpec>,
    pub sample_sizes: Vec<usize>,
    pub estimators: Vec<EstimatorSpec>,
    pub replicates: usize,
    pub seed: u64,
    pub allocation: AllocationRule,
    pub enumerate: bool,
}

impl Default for ScenarioGrid {
    fn default() -> Self {
        ScenarioGrid {
            designs: vec![DesignSpec::Srs],
            sample_sizes: vec![40],
            estimators: ["ht", "r1-minimax", "r1-q4", "r1-q10", "r2-minimax", "r3-minimax", "r4-minimax"]
                .iter()
                .map(|s| s.parse().expect("valid label"))
                .collect(),
            replicates: 500,
            seed: 1,
            allocation: AllocationRule::Neyman,
            enumerate: false,
        }
    }
}

impl ScenarioGrid {
    pub fn scenarios(&self) -> Vec<Scenario> {
        let mut out = Vec::new();
        for design in &self.designs {
            for &n in &self.sample_sizes {
                let mut s = Scenario::new(*design, n, self.estimators.clone(), self.replicates, self.seed);
                s.allocation = self.allocation.clone();
                s.enumerate = self.enumerate;
                out.push(s);
            }
        }
        out
    }
}

/// Contents of a simulation config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub population: PopulationSource,
    #[serde(default)]
    pub simulation: ScenarioGrid,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Runs every scenario of the grid in order.
    pub fn run(&self, base: Option<&Path>) -> Result<EvalTable> {
        let pop = self.population.load(base)?;
        let mut table = EvalTable::default();
        for scenario in self.simulation.scenarios() {
            log::info!("running scenario {}", scenario.label());
            table.extend(run_monte_carlo(&pop, &scenario)?);
        }
        Ok(table)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub const SUMMARY_HEADER: [&str; 6] = ["scenario", "estimator", "replicates", "rb", "rmse", "mean_seconds"];
pub const SERIES_HEADER: [&str; 8] = ["scenario", "estimator", "index", "time", "rb", "rb_defined", "rmse", "mse"];

pub fn write_summary_csv<W: Write>(table: &EvalTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in &table.rows {
        w.write_record([
            r.scenario.clone(),
            r.estimator.clone(),
            r.replicates.to_string(),
            fmt_opt(r.rb),
            fmt_opt(r.rmse),
            r.mean_seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_series_csv<W: Write>(table: &EvalTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SERIES_HEADER)?;
    for r in &table.rows {
        for p in &r.series {
            w.write_record([
                r.scenario.clone(),
                r.estimator.clone(),
                p.index.to_string(),
                p.time.to_string(),
                p.rb.to_string(),
                p.rb_defined.to_string(),
                fmt_opt(p.rmse),
                p.mse.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `summary.csv`, `summary.json` and `series.csv` into `dir`.
pub fn emit_tables(table: &EvalTable, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut summary = Vec::new();
    write_summary_csv(table, &mut summary)?;
    let mut series = Vec::new();
    write_series_csv(table, &mut series)?;
    let json = serde_json::to_vec_pretty(table)?;
    let files = [
        (dir.join("summary.csv"), summary),
        (dir.join("summary.json"), json),
        (dir.join("series.csv"), series),
    ];
    let mut out = Vec::new();
    for (path, bytes) in files {
        write_atomic(&path, &bytes)?;
        out.push(path);
    }
    Ok(out)
}
