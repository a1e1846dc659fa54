//! The `j2r` command line.
//!
//! Every option can also come from a flat TOML file given with `--config`;
//! keys are the long flag names with `-` replaced by `_` (`B` for `--B`).
//! Flags on the command line take precedence over the file.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::calibrate::{calibrate_all, write_weights_csv, Moments, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::dataset::{CsvSchema, LoadOptions, TrialDataset};
use crate::error::Error;
use crate::estimators::EstimatorKind;
use crate::inference::{analyze, Analysis, AnalysisOptions, CiChoice};
use crate::nuisance::{fit_nuisances, BasisKind, ModelSpec, NuisanceOverride, RawFeatures};
use crate::sim::{generate, run_mc, true_tau, DgpConfig, McConfig, Setting, SpecCell, TauMethod};

pub use config::FileConfig;

#[derive(Debug, Parser)]
#[command(name = "j2r", version, about = "Treatment effects under jump-to-reference for trials with dropout")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analyze a CSV dataset.
    Estimate(DataArgs),
    /// Run a Monte Carlo study.
    Simulate(SimArgs),
    /// Export inverse-probability and calibration weights.
    Weights(DataArgs),
    /// Compute the true effect of a simulation design.
    Oracle(SimArgs),
    /// Write one simulated dataset as CSV.
    Generate(SimArgs),
}

#[derive(Debug, Args, Default, Clone)]
pub struct Common {
    /// Flat TOML file with default values for any option.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory (estimate, simulate) or file (weights, generate, oracle).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated estimator names, or `all`.
    #[arg(long)]
    pub estimators: Option<String>,
    #[arg(long)]
    pub level: Option<f64>,
    /// Bootstrap replicates.
    #[arg(long = "B")]
    pub b: Option<usize>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct DataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// TOML schema naming the treatment, covariate, outcome and strata columns.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub treatment: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long)]
    pub covariates: Option<String>,
    /// Comma-separated outcome columns in visit order.
    #[arg(long)]
    pub outcomes: Option<String>,
    #[arg(long)]
    pub strata: Option<String>,
    #[arg(long)]
    pub missing_token: Option<String>,
    /// `linear`, `poly:D` or `spline:K` (K interior knots).
    #[arg(long)]
    pub basis: Option<String>,
    /// `first`, `first2` or `first2x`.
    #[arg(long)]
    pub calibration_moments: Option<String>,
    /// `auto`, `wald`, `percentile` or `symt`.
    #[arg(long)]
    pub ci: Option<String>,
    /// TOML file with constant nuisance values replacing the fitted ones.
    #[arg(long)]
    pub nuisance_override: Option<PathBuf>,
    #[arg(long)]
    pub drop_nonmonotone: bool,
    #[arg(long)]
    pub drop_missing_strata: bool,
}

#[derive(Debug, Args, Default, Clone)]
pub struct SimArgs {
    #[command(flatten)]
    pub common: Common,
    /// `cross`, `long` or `discrete`.
    #[arg(long)]
    pub setting: Option<String>,
    /// Sample size per dataset.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated specification cells such as `yyy,yyn`, or `all`.
    #[arg(long)]
    pub cells: Option<String>,
    /// Draws for the large-sample oracle.
    #[arg(long)]
    pub draws: Option<usize>,
    /// `mc` or `enumeration`.
    #[arg(long)]
    pub method: Option<String>,
}

/// Failure of a command, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(e) if e.is_data_error() => 2,
            CliError::Run(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

pub fn run_from_env() -> i32 {
    run(std::env::args_os())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> CliResult<()> {
    let common = match &cmd {
        Command::Estimate(a) | Command::Weights(a) => &a.common,
        Command::Simulate(a) | Command::Oracle(a) | Command::Generate(a) => &a.common,
    };
    let file = match &common.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let threads = common.threads.or(file.threads);
    let go = || match &cmd {
        Command::Estimate(a) => cmd_estimate(a, &file),
        Command::Weights(a) => cmd_weights(a, &file),
        Command::Simulate(a) => cmd_simulate(a, &file),
        Command::Oracle(a) => cmd_oracle(a, &file),
        Command::Generate(a) => cmd_generate(a, &file),
    };
    match threads {
        Some(0) => usage("--threads must be at least 1"),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {k} threads: {e}")))?
            .install(go),
        None => go(),
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect()
}

pub fn parse_estimators(s: &str) -> CliResult<Vec<EstimatorKind>> {
    if s.trim() == "all" {
        return Ok(EstimatorKind::ALL.to_vec());
    }
    let kinds: Vec<EstimatorKind> = split_list(s)
        .iter()
        .map(|v| EstimatorKind::parse(v).ok_or_else(|| CliError::Usage(format!("unknown estimator `{v}`"))))
        .collect::<CliResult<_>>()?;
    if kinds.is_empty() {
        return usage("no estimators given");
    }
    Ok(kinds)
}

pub fn parse_basis(s: &str) -> CliResult<BasisKind> {
    let (name, arg) = match s.split_once(':') {
        Some((a, b)) => (a, Some(b)),
        None => (s, None),
    };
    let num = |default: usize| -> CliResult<usize> {
        match arg {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Usage(format!("invalid basis size in `{s}`"))),
        }
    };
    match name {
        "linear" => Ok(BasisKind::Linear),
        "poly" => Ok(BasisKind::Polynomial(num(2)?.max(1))),
        "spline" => Ok(BasisKind::Spline {
            interior_knots: num(3)?,
        }),
        _ => usage(format!("unknown basis `{s}`")),
    }
}

fn data_schema(a: &DataArgs, file: &FileConfig) -> CliResult<CsvSchema> {
    let mut schema = if let Some(p) = a.schema.as_ref().or(file.schema.as_ref()) {
        CsvSchema::from_toml(&std::fs::read_to_string(p)?)?
    } else {
        let treatment = a.treatment.clone().or_else(|| file.treatment.clone());
        let covariates = a.covariates.as_deref().map(split_list).or_else(|| file.covariates.clone());
        let outcomes = a.outcomes.as_deref().map(split_list).or_else(|| file.outcomes.clone());
        match (treatment, covariates, outcomes) {
            (Some(t), Some(c), Some(o)) => {
                let c: Vec<&str> = c.iter().map(String::as_str).collect();
                let o: Vec<&str> = o.iter().map(String::as_str).collect();
                CsvSchema::new(&t, &c, &o)
            }
            _ => return usage("give --schema, or all of --treatment, --covariates and --outcomes"),
        }
    };
    if let Some(s) = a.strata.clone().or_else(|| file.strata.clone()) {
        schema.strata = Some(s);
    }
    if let Some(m) = a.missing_token.clone().or_else(|| file.missing_token.clone()) {
        schema.missing_token = m;
    }
    Ok(schema)
}

fn load_data(a: &DataArgs, file: &FileConfig) -> CliResult<TrialDataset> {
    let Some(path) = a.data.as_ref().or(file.data.as_ref()) else {
        return usage("--data is required");
    };
    let schema = data_schema(a, file)?;
    let opts = LoadOptions {
        drop_nonmonotone: a.drop_nonmonotone || file.drop_nonmonotone.unwrap_or(false),
        drop_missing_strata: a.drop_missing_strata || file.drop_missing_strata.unwrap_or(false),
    };
    let (ds, report) = TrialDataset::load_csv(path, &schema, opts)?;
    for (row, why) in &report.dropped {
        eprintln!("warning: dropped data row {row}: {why}");
    }
    Ok(ds)
}

fn model_spec(a: &DataArgs, file: &FileConfig) -> CliResult<ModelSpec> {
    let basis = parse_basis(a.basis.as_deref().or(file.basis.as_deref()).unwrap_or("spline:3"))?;
    let m = a
        .calibration_moments
        .as_deref()
        .or(file.calibration_moments.as_deref())
        .unwrap_or("first2");
    let moments = Moments::parse(m).ok_or_else(|| CliError::Usage(format!("unknown calibration moments `{m}`")))?;
    Ok(ModelSpec::uniform(Arc::new(RawFeatures), basis, moments))
}

fn level(c: &Common, file: &FileConfig) -> CliResult<f64> {
    let l = c.level.or(file.level).unwrap_or(0.95);
    if !(l > 0.0 && l < 1.0) {
        return usage("--level must lie in (0, 1)");
    }
    Ok(l)
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    n: usize,
    visits: usize,
    seed: u64,
    estimates: &'a [crate::inference::EstimateReport],
    diagnostics: &'a [String],
}

pub const ESTIMATE_CSV_HEADER: &str =
    "estimator,estimate,se,variance_method,ci_lower,ci_upper,ci_length,ci_method,level,bootstrap_reps,bootstrap_failures";

fn write_estimate_csv(path: &Path, analysis: &Analysis) -> CliResult<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{ESTIMATE_CSV_HEADER}")?;
    for r in &analysis.reports {
        writeln!(
            f,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{}",
            r.estimator,
            r.tau,
            r.se,
            r.variance_method,
            r.lo,
            r.hi,
            r.hi - r.lo,
            r.ci_method,
            r.level,
            r.bootstrap_reps,
            r.bootstrap_failures
        )?;
    }
    Ok(())
}

fn estimate_table(analysis: &Analysis) -> String {
    let mut s = String::new();
    let pct = analysis.reports.first().map_or(95.0, |r| 100.0 * r.level);
    s.push_str(&format!(
        "{:<10}{:>12}{:>26}{:>12}\n",
        "estimator",
        "estimate",
        format!("{pct}% CI"),
        "CI length"
    ));
    for r in &analysis.reports {
        s.push_str(&format!(
            "{:<10}{:>12.4}{:>26}{:>12.4}\n",
            r.estimator,
            r.tau,
            format!("({:.4}, {:.4})", r.lo, r.hi),
            r.hi - r.lo
        ));
    }
    s
}

fn out_dir(c: &Common, file: &FileConfig) -> CliResult<PathBuf> {
    let dir = c.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn cmd_estimate(a: &DataArgs, file: &FileConfig) -> CliResult<()> {
    let c = &a.common;
    let ds = load_data(a, file)?;
    let spec = model_spec(a, file)?;
    let ci_s = a.ci.as_deref().or(file.ci.as_deref()).unwrap_or("auto");
    let ci = CiChoice::parse(ci_s).ok_or_else(|| CliError::Usage(format!("unknown interval `{ci_s}`")))?;
    let kinds = parse_estimators(c.estimators.as_deref().or(file.estimators.as_deref()).unwrap_or("all"))?;
    let nuisance_override = match a.nuisance_override.as_ref().or(file.nuisance_override.as_ref()) {
        Some(p) => Some(NuisanceOverride::from_toml(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    let seed = c.seed.or(file.seed).unwrap_or(1);
    let opts = AnalysisOptions {
        kinds,
        ci,
        b: c.b.or(file.b).unwrap_or(500),
        seed,
        level: level(c, file)?,
        calibration_tol: DEFAULT_TOL,
        calibration_max_iter: DEFAULT_MAX_ITER,
        nuisance_override,
    };
    let analysis = analyze(&ds, &spec, &opts)?;
    let dir = out_dir(c, file)?;
    let json = serde_json::to_string_pretty(&EstimateOutput {
        n: ds.n(),
        visits: ds.t(),
        seed,
        estimates: &analysis.reports,
        diagnostics: &analysis.diagnostics,
    })
    .map_err(|e| CliError::Run(Error::InvalidInput(e.to_string())))?;
    std::fs::write(dir.join("estimate.json"), json + "\n")?;
    write_estimate_csv(&dir.join("estimate.csv"), &analysis)?;
    for d in &analysis.diagnostics {
        eprintln!("note: {d}");
    }
    print!("{}", estimate_table(&analysis));
    Ok(())
}

pub fn cmd_weights(a: &DataArgs, file: &FileConfig) -> CliResult<()> {
    let ds = load_data(a, file)?;
    let spec = model_spec(a, file)?;
    let path = match a.common.out.clone().or_else(|| file.out.clone()) {
        Some(p) => p,
        None => {
            let p = PathBuf::from("weights.csv");
            eprintln!("warning: no --out given, writing {}", p.display());
            p
        }
    };
    let fit = fit_nuisances(&ds, &spec)?;
    let cal = calibrate_all(&ds, &spec.calibration, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    write_weights_csv(&path, &ds, &fit.values, Some(&cal))?;
    Ok(())
}

fn setting(a: &SimArgs, file: &FileConfig) -> CliResult<Setting> {
    let s = a.setting.as_deref().or(file.setting.as_deref()).unwrap_or("cross");
    Setting::parse(s).ok_or_else(|| CliError::Usage(format!("unknown setting `{s}`")))
}

fn dgp(a: &SimArgs, file: &FileConfig) -> CliResult<DgpConfig> {
    let mut d = file.dgp.clone().unwrap_or_default();
    d.setting = setting(a, file)?;
    d.n = a.n.or(file.n).unwrap_or(500);
    d.seed = a.common.seed.or(file.seed).unwrap_or(1);
    if d.n == 0 {
        return usage("--n must be at least 1");
    }
    Ok(d)
}

pub fn cmd_simulate(a: &SimArgs, file: &FileConfig) -> CliResult<()> {
    let c = &a.common;
    let dgp = dgp(a, file)?;
    let reps = a.reps.or(file.reps).unwrap_or(200);
    if reps == 0 {
        return usage("--reps must be at least 1");
    }
    let default_b = if dgp.setting == Setting::CrossSectional { 100 } else { 200 };
    let cells = match a.cells.as_deref().or(file.cells.as_deref()) {
        None | Some("all") => SpecCell::grid(),
        Some(s) => split_list(s)
            .iter()
            .map(|v| SpecCell::parse(v).ok_or_else(|| CliError::Usage(format!("unknown cell `{v}`"))))
            .collect::<CliResult<_>>()?,
    };
    let cfg = McConfig {
        cells,
        kinds: parse_estimators(c.estimators.as_deref().or(file.estimators.as_deref()).unwrap_or("all"))?,
        reps,
        b: c.b.or(file.b).unwrap_or(default_b),
        level: level(c, file)?,
        true_tau: None,
        spec: None,
        dgp,
    };
    let report = run_mc(&cfg)?;
    let dir = out_dir(c, file)?;
    let stem = format!("sim_{}", report.setting.name());
    report.write_csv(std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.csv")))?))?;
    let table = report.to_table();
    std::fs::write(dir.join(format!("{stem}.txt")), &table)?;
    for (r, msg) in &report.failed {
        eprintln!("warning: replicate {r} failed: {msg}");
    }
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct OracleOutput {
    setting: &'static str,
    method: String,
    seed: u64,
    true_tau: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    identification: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eif_variance: Option<f64>,
}

pub fn cmd_oracle(a: &SimArgs, file: &FileConfig) -> CliResult<()> {
    let d = dgp(a, file)?;
    let default_method = if d.setting == Setting::DiscreteOracle { "enumeration" } else { "mc" };
    let method = match a.method.as_deref().or(file.method.as_deref()).unwrap_or(default_method) {
        "mc" => TauMethod::McLargeN {
            draws: a.draws.or(file.draws).unwrap_or(10_000_000),
        },
        "enumeration" => TauMethod::Enumeration,
        m => return usage(format!("unknown oracle method `{m}`")),
    };
    let tau = true_tau(&d, method)?;
    let (identification, eif_variance) = if d.setting == Setting::DiscreteOracle {
        let id = d.discrete.identification();
        (
            Some([id.response_pattern, id.propensity_outcome, id.propensity_response, id.eif_mean]),
            Some(d.discrete.eif_variance()),
        )
    } else {
        (None, None)
    };
    let out = OracleOutput {
        setting: d.setting.name(),
        method: match method {
            TauMethod::McLargeN { draws } => format!("mc:{draws}"),
            TauMethod::Enumeration => "enumeration".into(),
        },
        seed: d.seed,
        true_tau: tau,
        identification,
        eif_variance,
    };
    let json = serde_json::to_string_pretty(&out).map_err(|e| CliError::Run(Error::InvalidInput(e.to_string())))?;
    if let Some(p) = a.common.out.clone().or_else(|| file.out.clone()) {
        std::fs::write(p, json.clone() + "\n")?;
    }
    println!("{json}");
    Ok(())
}

pub fn cmd_generate(a: &SimArgs, file: &FileConfig) -> CliResult<()> {
    let d = dgp(a, file)?;
    let ds = generate(&d)?;
    let schema = ds.default_schema();
    match a.common.out.clone().or_else(|| file.out.clone()) {
        Some(p) => ds.write_csv_file(p, &schema)?,
        None => ds.write_csv(std::io::stdout().lock(), &schema)?,
    }
    Ok(())
}
