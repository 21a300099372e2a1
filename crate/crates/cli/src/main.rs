use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use curvesurvey::estimator::EstimatorSpec;
use curvesurvey::mse::{estimate_mse, MseMethod};
use curvesurvey::population_io::{
    apply_strata_jumpers, generate_population, load_population, write_population, JumperSpec, SyntheticSpec,
};
use curvesurvey::robust_pointwise::Tuning;
use curvesurvey::robust_spca::SpcaConfig;
use curvesurvey::robust_wavelet::WaveletFamily;
use curvesurvey::sampling::{allocate, AllocationRule};
use curvesurvey::simulation::{emit_tables, SimConfig};
use curvesurvey::{population_total, CurvePopulation, Design, Quadrature, SampleData};

#[derive(Parser, Debug, Serialize)]
#[command(name = "curvesurvey", version, about = "Robust totals of curve data under survey sampling")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Write a synthetic population, or add strata jumpers to an existing one.
    Generate(GenerateArgs),
    /// Estimate the total curve from one sample.
    Estimate(EstimateArgs),
    /// Estimate the pointwise MSE of an estimator from one sample.
    Mse(MseArgs),
    /// Run a Monte Carlo study described by a TOML file.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Serialize)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["synthetic", "input"]))]
struct GenerateArgs {
    #[arg(long)]
    synthetic: bool,
    /// Existing population CSV to add jumpers to.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    n_pop: usize,
    #[arg(long, default_value_t = 48)]
    d: usize,
    #[arg(long, default_value_t = 5)]
    n_strata: usize,
    /// Grid points per daily cycle (default: d).
    #[arg(long)]
    daily_period: Option<usize>,
    #[arg(long, default_value_t = 0.02)]
    outlier_fraction: f64,
    #[arg(long, default_value_t = 8.0)]
    outlier_scale: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Fraction of units moved to a wrong stratum.
    #[arg(long)]
    jumper_rate: Option<f64>,
    #[arg(long, value_enum, default_value_t = QuadratureArg::Trapezoid)]
    quadrature: QuadratureArg,
    #[arg(long, short, default_value = "population.csv")]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum QuadratureArg {
    Trapezoid,
    Unit,
}

impl From<QuadratureArg> for Quadrature {
    fn from(q: QuadratureArg) -> Self {
        match q {
            QuadratureArg::Trapezoid => Quadrature::Trapezoid,
            QuadratureArg::Unit => Quadrature::Unit,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum EstimatorArg {
    Ht,
    R1,
    R2,
    R3,
    R4,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum DesignArg {
    Srs,
    Str,
}

#[derive(Args, Debug, Serialize)]
struct SampleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = QuadratureArg::Trapezoid)]
    quadrature: QuadratureArg,
    #[arg(long, value_enum, default_value_t = DesignArg::Srs)]
    design: DesignArg,
    /// Sample size.
    #[arg(long)]
    n: usize,
    /// Stratified allocation: neyman, proportional or explicit=n1,n2,...
    #[arg(long, default_value = "neyman")]
    allocation: String,
    /// Seed of the sample draw.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct EstimatorArgs {
    #[arg(value_enum)]
    estimator: EstimatorArg,
    /// minimax, qpow (q = 4), qpow:<q> or q<q>.
    #[arg(long)]
    tuning: Option<String>,
    /// Number of principal components (r2 only).
    #[arg(long)]
    k: Option<usize>,
    /// symlet10 or haar (r3 only).
    #[arg(long)]
    wavelet: Option<String>,
    /// Smoothing window of the depth envelope (r4 only).
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct EstimateArgs {
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[command(flatten)]
    sample: SampleArgs,
    #[arg(long, short, default_value = "total.csv")]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Linearization,
    Gross,
    Genboot,
}

impl From<MethodArg> for MseMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Linearization => MseMethod::Linearization,
            MethodArg::Gross => MseMethod::GrossBootstrap,
            MethodArg::Genboot => MseMethod::GeneralizedBootstrap,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct MseArgs {
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[command(flatten)]
    sample: SampleArgs,
    #[arg(long, value_enum, default_value_t = MethodArg::Linearization)]
    method: MethodArg,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Seed of the bootstrap replicates.
    #[arg(long, default_value_t = 1)]
    boot_seed: u64,
    /// Use the true population total in the bias term (diagnostic).
    #[arg(long)]
    known_total: bool,
    #[arg(long, short, default_value = "mse.csv")]
    output: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` of the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

/// Inconsistent arguments detected after parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let is_usage = err.downcast_ref::<UsageError>().is_some();
            let report = json!({
                "error": if is_usage { "usage" } else { "data" },
                "message": format!("{err:#}"),
            });
            eprintln!("{report}");
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Generate(args) => generate(cli, args),
        Command::Estimate(args) => estimate(cli, args),
        Command::Mse(args) => mse(cli, args),
        Command::Simulate(args) => simulate(cli, args),
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn sidecar_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        path.with_extension("meta.json")
    } else {
        path.with_extension("json")
    }
}

fn write_sidecar(path: &Path, cli: &Cli, details: serde_json::Value) -> anyhow::Result<()> {
    let meta = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "invocation": cli,
        "output": path,
        "details": details,
    });
    write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&meta)?)
}

fn generate(cli: &Cli, args: &GenerateArgs) -> anyhow::Result<()> {
    let (mut pop, synthetic) = if args.synthetic {
        let spec = SyntheticSpec {
            n_pop: args.n_pop,
            d: args.d,
            n_strata: args.n_strata,
            daily_period: args.daily_period.unwrap_or(args.d),
            outlier_fraction: args.outlier_fraction,
            outlier_scale: args.outlier_scale,
            seed: args.seed,
            ..Default::default()
        };
        (generate_population(&spec)?, Some(spec))
    } else {
        let input = args.input.as_ref().expect("clap group");
        let pop = load_population(input, args.quadrature.into()).with_context(|| format!("reading {}", input.display()))?;
        (pop, None)
    };
    let jumpers = args.jumper_rate.map(|rate| JumperSpec { rate, seed: args.seed });
    if let Some(j) = &jumpers {
        pop = apply_strata_jumpers(&pop, j)?;
    } else if !args.synthetic {
        return Err(usage("--input without --jumper-rate leaves the population unchanged"));
    }
    let mut bytes = Vec::new();
    write_population(&pop, &mut bytes)?;
    write_atomic(&args.output, &bytes)?;
    write_sidecar(
        &args.output,
        cli,
        json!({
            "synthetic": synthetic,
            "jumpers": jumpers,
            "population_size": pop.size(),
            "grid_length": pop.grid().len(),
            "strata_sizes": pop.strata().map(|_| pop.stratum_sizes()),
        }),
    )
}

fn estimator_spec(args: &EstimatorArgs) -> anyhow::Result<EstimatorSpec> {
    let e = args.estimator;
    if args.k.is_some() && e != EstimatorArg::R2 {
        return Err(usage("--k applies to r2 only"));
    }
    if args.wavelet.is_some() && e != EstimatorArg::R3 {
        return Err(usage("--wavelet applies to r3 only"));
    }
    if args.window.is_some() && e != EstimatorArg::R4 {
        return Err(usage("--window applies to r4 only"));
    }
    if args.tuning.is_some() && e == EstimatorArg::Ht {
        return Err(usage("--tuning does not apply to ht"));
    }
    let tuning: Tuning = match &args.tuning {
        Some(t) => t.parse().map_err(|err| usage(format!("{err}")))?,
        None => Tuning::default(),
    };
    Ok(match e {
        EstimatorArg::Ht => EstimatorSpec::Ht,
        EstimatorArg::R1 => EstimatorSpec::R1 { tuning },
        EstimatorArg::R2 => {
            let mut spca = SpcaConfig::default();
            if let Some(k) = args.k {
                if k == 0 {
                    return Err(usage("--k must be positive"));
                }
                spca.k = k;
            }
            EstimatorSpec::R2 { tuning, spca }
        }
        EstimatorArg::R3 => {
            let wavelet: WaveletFamily = match &args.wavelet {
                Some(w) => w.parse().map_err(|err| usage(format!("{err}")))?,
                None => WaveletFamily::default(),
            };
            EstimatorSpec::R3 { tuning, wavelet }
        }
        EstimatorArg::R4 => EstimatorSpec::R4 {
            tuning,
            window: args.window.unwrap_or(curvesurvey::robust_depth::DEFAULT_WINDOW),
        },
    })
}

fn draw_sample(args: &SampleArgs) -> anyhow::Result<(CurvePopulation, Design, SampleData)> {
    let pop = load_population(&args.input, args.quadrature.into())
        .with_context(|| format!("reading {}", args.input.display()))?;
    let design = match args.design {
        DesignArg::Srs => Design::srs(pop.size(), args.n)?,
        DesignArg::Str => {
            let rule: AllocationRule = args.allocation.parse().map_err(|err| usage(format!("{err}")))?;
            allocate(&pop, args.n, &rule)?
        }
    };
    let draw = design.draw(args.seed);
    let data = SampleData::new(&pop, &draw)?;
    Ok((pop, design, data))
}

fn sample_details(design: &Design, data: &SampleData) -> serde_json::Value {
    json!({
        "population_size": design.population_size(),
        "sample_size": design.sample_size(),
        "allocation": design.allocation(),
        "units": data.units,
    })
}

fn write_curve_table(path: &Path, times: &[f64], columns: &[(&str, &[f64])]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["index", "time"];
    header.extend(columns.iter().map(|(name, _)| *name));
    w.write_record(&header)?;
    for (t, time) in times.iter().enumerate() {
        let mut record = vec![t.to_string(), time.to_string()];
        record.extend(columns.iter().map(|(_, v)| v[t].to_string()));
        w.write_record(&record)?;
    }
    write_atomic(path, &w.into_inner()?)
}

fn estimate(cli: &Cli, args: &EstimateArgs) -> anyhow::Result<()> {
    let spec = estimator_spec(&args.estimator)?;
    let (pop, design, data) = draw_sample(&args.sample)?;
    let est = spec.estimate(&data)?;
    let ht = curvesurvey::ht_estimator::ht_total(&data);
    write_curve_table(
        &args.output,
        pop.grid().points(),
        &[("estimate", est.curve.values()), ("ht", ht.values())],
    )?;
    write_sidecar(
        &args.output,
        cli,
        json!({
            "estimator": spec,
            "settings": estimator_settings(&spec),
            "constants": est.constants,
            "delta": est.delta,
            "sample": sample_details(&design, &data),
        }),
    )
}

fn estimator_settings(spec: &EstimatorSpec) -> serde_json::Value {
    match spec {
        EstimatorSpec::Ht => json!({ "kind": "ht" }),
        EstimatorSpec::R1 { tuning } => json!({ "kind": "r1", "tuning": tuning }),
        EstimatorSpec::R2 { tuning, spca } => json!({ "kind": "r2", "tuning": tuning, "spca": spca }),
        EstimatorSpec::R3 { tuning, wavelet } => json!({ "kind": "r3", "tuning": tuning, "wavelet": wavelet.to_string() }),
        EstimatorSpec::R4 { tuning, window } => json!({ "kind": "r4", "tuning": tuning, "window": window }),
    }
}

fn mse(cli: &Cli, args: &MseArgs) -> anyhow::Result<()> {
    let spec = estimator_spec(&args.estimator)?;
    let method: MseMethod = args.method.into();
    if method != MseMethod::Linearization && args.reps < 2 {
        return Err(usage("--reps must be at least 2"));
    }
    let (pop, design, data) = draw_sample(&args.sample)?;
    let mut report = estimate_mse(method, &spec, &data, args.reps, args.boot_seed)?;
    if args.known_total {
        report = report.with_known_total(population_total(&pop).values());
    }
    write_curve_table(
        &args.output,
        pop.grid().points(),
        &[
            ("estimate", &report.estimate),
            ("ht", &report.ht),
            ("v_robust", &report.v_robust),
            ("v_diff", &report.v_diff),
            ("bias_sq", &report.bias_sq),
            ("mse", &report.mse),
        ],
    )?;
    write_sidecar(
        &args.output,
        cli,
        json!({
            "estimator": spec,
            "settings": estimator_settings(&spec),
            "method": method,
            "replicates": report.replicates,
            "known_total": args.known_total,
            "sample": sample_details(&design, &data),
        }),
    )
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let config = SimConfig::from_toml(&text).map_err(|err| usage(format!("{}: {err}", args.config.display())))?;
    let base = args.config.parent().map(Path::to_path_buf);
    let out_dir = match (&args.output_dir, &config.output_dir) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) => match &base {
            Some(b) if dir.is_relative() => b.join(dir),
            _ => dir.clone(),
        },
        (None, None) => PathBuf::from("simulation"),
    };
    let table = config.run(base.as_deref())?;
    let files = emit_tables(&table, &out_dir)?;
    for file in &files {
        write_sidecar(file, cli, json!({ "config": config }))?;
    }
    Ok(())
}
