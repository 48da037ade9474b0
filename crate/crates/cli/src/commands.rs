use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mixl_core::averaging::{average, MAResult};
use mixl_core::data::ChoiceDataset;
use mixl_core::estimation::{fit_model, DataSource, FitOptions, FitResult};
use mixl_core::mixing::Family;
use mixl_core::models::Space;
use mixl_core::postest::{
    density_grid, predict_ma_shares, predict_shares, sample_ma_unconditionals,
    sample_unconditionals, wtp_summary, DensityGrid, UnconditionalDraws, WtpRow, DEFAULT_BINS,
};
use mixl_core::simgen::{generate, truth_densities, SimConfig, SimOutput, TRUTH_DENSITY_SAMPLES};

use crate::error::{CliError, CliResult};
use crate::io::{parent_dir, read_json, relative_to, resolve, write_atomic, write_csv, write_json};
use crate::replicate::{self, ReplicateArgs};
use crate::specfile::{load_data, SpecFile};

pub const DATA_FILE: &str = "data.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const TRUTH_DENSITY_FILE: &str = "truth_density.csv";
pub const FIT_SUMMARY_FILE: &str = "fit_summary.csv";
pub const SHARES_FILE: &str = "shares.csv";
pub const WTP_FILE: &str = "wtp.csv";
pub const DENSITY_FILE: &str = "density.csv";
pub const SPEC_FILE: &str = "spec.json";

/// Families run by `estimate --family all`, in output order.
pub const ALL_FAMILIES: [&str; 8] = [
    "normal",
    "uniform",
    "triangular",
    "lognormal",
    "loguniform",
    "fm2",
    "fm3",
    "at",
];

/// Seed offsets so each stage draws from its own stream.
pub(crate) const TRUTH_STREAM: u64 = 1;
pub(crate) const UNCONDITIONAL_STREAM: u64 = 2;
pub(crate) const WTP_STREAM: u64 = 3;

pub(crate) fn stream(seed: u64, offset: u64) -> u64 {
    seed.wrapping_add(offset.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

#[derive(Debug, Parser)]
#[command(
    name = "mixl",
    version,
    about = "Panel mixed logit estimation and model averaging"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulated drug-choice panel with its truth tables.
    Simulate(SimulateArgs),
    /// Write the default spec file for simulated data.
    Spec(SpecArgs),
    /// Fit one family, or all eight with `--family all`.
    Estimate(EstimateArgs),
    /// Combine fits into a model-averaged artifact.
    Average(AverageArgs),
    /// Predicted shares per alternative label.
    Predict(PredictArgs),
    /// Mean WTP with 95% intervals from a WTP-space fit.
    Wtp(WtpArgs),
    /// Density grids of unconditional coefficient draws.
    Density(DensityArgs),
    /// simulate → estimate all → average → predict/wtp/density → recovery.
    ReplicateSim(ReplicateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutArg {
    /// Output directory.
    #[arg(long, env = "MIXL_OUT_DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Preference,
    Wtp,
}

impl From<SpaceArg> for Space {
    fn from(s: SpaceArg) -> Self {
        match s {
            SpaceArg::Preference => Space::Preference,
            SpaceArg::Wtp => Space::Wtp,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// JSON simulation config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub persons: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub tasks: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args)]
pub struct SpecArgs {
    #[arg(long, value_enum, default_value_t = SpaceArg::Preference)]
    pub space: SpaceArg,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    /// Long-format choice data.
    #[arg(long)]
    pub data: PathBuf,
    /// Spec file; defaults to the simulated-data layout.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Space of the default spec (ignored with `--spec`).
    #[arg(long, value_enum, default_value_t = SpaceArg::Preference)]
    pub space: SpaceArg,
    /// Mixing family applied to every random coefficient, or `all`.
    #[arg(long, value_parser = parse_family_choice)]
    pub family: Option<FamilyChoice>,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub draws: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub multistart: u64,
    /// Start from the fixed-coefficient fit.
    #[arg(long)]
    pub warm_start: bool,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FamilyChoice {
    One(Family),
    All,
}

fn parse_family_choice(s: &str) -> Result<FamilyChoice, String> {
    if s == "all" {
        return Ok(FamilyChoice::All);
    }
    s.parse::<Family>()
        .map(FamilyChoice::One)
        .map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct AverageArgs {
    /// Fit artifacts (at least two).
    #[arg(required = true)]
    pub fits: Vec<PathBuf>,
    /// Artifact name, written as `<name>.json` and `<name>_weights.csv`.
    #[arg(long, default_value = "ma")]
    pub name: String,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args)]
#[group(id = "source", required = true, multiple = false, args = ["fit", "ma"])]
pub struct SourceArg {
    /// A fit artifact.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// A model-averaged artifact.
    #[arg(long)]
    pub ma: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub source: SourceArg,
    /// Data to predict on; defaults to the data the fit was estimated on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args)]
pub struct WtpArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args)]
pub struct DensityArgs {
    #[command(flatten)]
    pub source: SourceArg,
    #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long, default_value_t = DEFAULT_BINS as u64, value_parser = clap::value_parser!(u64).range(2..))]
    pub bins: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Spec(a) => spec(&a),
        Command::Estimate(a) => estimate(&a).map(|_| ()),
        Command::Average(a) => cmd_average(&a).map(|_| ()),
        Command::Predict(a) => predict(&a),
        Command::Wtp(a) => wtp(&a),
        Command::Density(a) => density(&a),
        Command::ReplicateSim(a) => replicate::run(&a).map(|_| ()),
    }
}

pub(crate) fn warn(message: impl std::fmt::Display) {
    eprintln!("{}", serde_json::json!({ "warning": message.to_string() }));
}

pub(crate) fn fmt(v: f64) -> String {
    v.to_string()
}

// ---- simulate -------------------------------------------------------------

pub fn sim_config(args: &SimulateArgs) -> CliResult<SimConfig> {
    let mut config = match &args.config {
        Some(p) => read_json::<SimConfig>(p)?,
        None => SimConfig::default(),
    };
    config.seed = args.seed;
    if let Some(n) = args.persons {
        config.n_persons = n as usize;
    }
    if let Some(t) = args.tasks {
        config.n_tasks = t as usize;
    }
    Ok(config)
}

/// Writes data, truth table and truth densities into `out`.
pub fn write_simulation(config: &SimConfig, out: &Path) -> CliResult<SimOutput> {
    let sim = generate(config)?;
    let mut data = Vec::new();
    mixl_core::data::write_long_csv(&sim.dataset, &mut data)?;
    write_atomic(&out.join(DATA_FILE), &data)?;
    let mut truth = Vec::new();
    sim.truth.write_csv(&mut truth)?;
    write_atomic(&out.join(TRUTH_FILE), &truth)?;
    let grids = truth_densities(&config.truth, stream(config.seed, TRUTH_STREAM))?;
    let rows = grids
        .iter()
        .flat_map(|(coef, g)| density_rows("truth", coef, g));
    write_csv(&out.join(TRUTH_DENSITY_FILE), &DENSITY_HEADER, rows)?;
    Ok(sim)
}

fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let config = sim_config(args)?;
    write_simulation(&config, &args.out.out)?;
    Ok(())
}

fn spec(args: &SpecArgs) -> CliResult<()> {
    write_json(
        &args.out.out.join(SPEC_FILE),
        &SpecFile::simulated(args.space.into()),
    )
}

// ---- estimate -------------------------------------------------------------

pub fn fit_file_name(label: &str) -> String {
    format!("fit_{label}.json")
}

const SUMMARY_HEADER: [&str; 10] = [
    "label",
    "loglik",
    "k",
    "aic",
    "bic",
    "n_obs",
    "status",
    "iterations",
    "grad_norm",
    "file",
];

fn summary_row(fit: &FitResult) -> Vec<String> {
    vec![
        fit.label.clone(),
        fmt(fit.loglik),
        fit.k.to_string(),
        fmt(fit.aic),
        fmt(fit.bic),
        fit.n_obs.to_string(),
        fit.convergence.status.as_str().to_string(),
        fit.convergence.iterations.to_string(),
        fmt(fit.convergence.grad_norm),
        fit_file_name(&fit.label),
    ]
}

/// What `estimate` needs once the data and spec are loaded.
pub struct EstimateJob<'a> {
    pub spec: &'a SpecFile,
    pub data: &'a ChoiceDataset,
    pub data_path: &'a Path,
    pub families: Vec<Option<Family>>,
    pub opts: FitOptions,
    pub out: &'a Path,
}

/// Fits each requested family, writing artifacts and a summary. A failed
/// family in a batch is reported and skipped; the first failure is returned
/// after everything else is written.
pub fn run_estimates(job: &EstimateJob<'_>) -> CliResult<(Vec<FitResult>, Option<CliError>)> {
    let source = DataSource {
        path: relative_to(job.data_path, job.out),
        columns: job.spec.columns.clone(),
        coding: job.spec.coding.clone(),
    };
    let mut fits = Vec::new();
    let mut failure = None;
    for family in &job.families {
        let (model_spec, label) = match family {
            Some(f) => (job.spec.model.with_family(*f), f.as_str().to_string()),
            None => (job.spec.model.clone(), "model".to_string()),
        };
        match fit_model(&model_spec, job.data, &job.opts, &label) {
            Ok(mut fit) => {
                fit.data = Some(source.clone());
                if !fit.converged() {
                    warn(format!("{label}: {}", fit.convergence.status.as_str()));
                }
                write_json(&job.out.join(fit_file_name(&label)), &fit)?;
                fits.push(fit);
            }
            Err(e) => {
                let err = CliError::from(e).context(&label);
                if job.families.len() == 1 {
                    return Err(err);
                }
                warn(&err);
                failure.get_or_insert(err);
            }
        }
    }
    write_csv(
        &job.out.join(FIT_SUMMARY_FILE),
        &SUMMARY_HEADER,
        fits.iter().map(summary_row),
    )?;
    Ok((fits, failure))
}

fn estimate(args: &EstimateArgs) -> CliResult<Vec<FitResult>> {
    let spec = SpecFile::load_or_default(args.spec.as_deref(), args.space.into())?;
    let data = load_data(&args.data, &spec.columns, &spec.coding)?;
    let families = match &args.family {
        None => vec![None],
        Some(FamilyChoice::One(f)) => vec![Some(*f)],
        Some(FamilyChoice::All) => ALL_FAMILIES
            .iter()
            .map(|f| Some(f.parse().expect("known family")))
            .collect(),
    };
    let opts = FitOptions {
        n_draws: args.draws as usize,
        seed: args.seed,
        multistart: args.multistart as usize,
        warm_start: args.warm_start,
        ..FitOptions::default()
    };
    let job = EstimateJob {
        spec: &spec,
        data: &data,
        data_path: &args.data,
        families,
        opts,
        out: &args.out.out,
    };
    let (fits, failure) = run_estimates(&job)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(fits),
    }
}

// ---- loading artifacts ----------------------------------------------------

pub fn load_fit(path: &Path) -> CliResult<FitResult> {
    let fit: FitResult = read_json(path)?;
    if fit.format != mixl_core::estimation::FIT_FORMAT {
        return Err(
            CliError::data(format!("unsupported fit format `{}`", fit.format))
                .context(path.display()),
        );
    }
    Ok(fit)
}

pub fn load_ma(path: &Path) -> CliResult<(MAResult, Vec<FitResult>)> {
    let ma: MAResult = read_json(path)?;
    if ma.format != mixl_core::averaging::MA_FORMAT {
        return Err(
            CliError::data(format!("unsupported averaging format `{}`", ma.format))
                .context(path.display()),
        );
    }
    let base = parent_dir(path);
    let mut fits = Vec::with_capacity(ma.constituents.len());
    for c in &ma.constituents {
        let rel = c.path.as_deref().ok_or_else(|| {
            CliError::data(format!("constituent `{}` has no artifact path", c.id))
                .context(path.display())
        })?;
        fits.push(load_fit(&resolve(rel, &base))?);
    }
    Ok((ma, fits))
}

/// Data a fit was estimated on, found through its recorded source.
pub fn fit_data(
    fit: &FitResult,
    fit_path: &Path,
    override_path: Option<&Path>,
) -> CliResult<ChoiceDataset> {
    let source = fit.data.as_ref().ok_or_else(|| {
        CliError::data("fit artifact records no data source; pass --data")
            .context(fit_path.display())
    })?;
    let path = match override_path {
        Some(p) => p.to_path_buf(),
        None => resolve(&source.path, &parent_dir(fit_path)),
    };
    load_data(&path, &source.columns, &source.coding)
}

// ---- average --------------------------------------------------------------

pub fn write_average(
    fits: &[FitResult],
    paths: &[PathBuf],
    out: &Path,
    name: &str,
) -> CliResult<MAResult> {
    let mut ids: Vec<String> = Vec::with_capacity(fits.len());
    for f in fits {
        let mut id = f.label.clone();
        let mut n = 2;
        while ids.contains(&id) {
            id = format!("{}_{n}", f.label);
            n += 1;
        }
        ids.push(id);
    }
    let refs: Vec<&FitResult> = fits.iter().collect();
    let mut ma = average(&ids, &refs).map_err(|e| {
        let listed: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
        CliError::from(e).context(listed.join(", "))
    })?;
    for (c, p) in ma.constituents.iter_mut().zip(paths) {
        c.path = Some(relative_to(p, out));
    }
    if !ma.status.is_converged() {
        warn(format!("weights: {}", ma.status.as_str()));
    }
    write_json(&out.join(format!("{name}.json")), &ma)?;
    let rows = ma
        .constituents
        .iter()
        .zip(&ma.weights)
        .zip(&ma.theta)
        .map(|((c, w), t)| {
            vec![
                c.id.clone(),
                fmt(*w),
                fmt(*t),
                fmt(c.loglik),
                c.k.to_string(),
                c.path.clone().unwrap_or_default(),
            ]
        });
    write_csv(
        &out.join(format!("{name}_weights.csv")),
        &["id", "weight", "theta", "loglik", "k", "file"],
        rows,
    )?;
    Ok(ma)
}

fn cmd_average(args: &AverageArgs) -> CliResult<MAResult> {
    if args.fits.len() < 2 {
        return Err(CliError::usage(
            "averaging needs at least two fit artifacts",
        ));
    }
    let fits = args
        .fits
        .iter()
        .map(|p| load_fit(p))
        .collect::<CliResult<Vec<_>>>()?;
    write_average(&fits, &args.fits, &args.out.out, &args.name)
}

// ---- predict / wtp / density ----------------------------------------------

pub(crate) fn share_rows(model: &str, shares: &[(String, f64)]) -> Vec<Vec<String>> {
    shares
        .iter()
        .map(|(label, s)| vec![model.to_string(), label.clone(), fmt(*s)])
        .collect()
}

pub(crate) const SHARES_HEADER: [&str; 3] = ["model", "label", "share"];

fn predict(args: &PredictArgs) -> CliResult<()> {
    let rows = match (&args.source.fit, &args.source.ma) {
        (Some(p), _) => {
            let fit = load_fit(p)?;
            let data = fit_data(&fit, p, args.data.as_deref())?;
            share_rows(&fit.label, &predict_shares(&fit, &data)?)
        }
        (None, Some(p)) => {
            let (ma, fits) = load_ma(p)?;
            let first = ma.constituents[0]
                .path
                .as_deref()
                .map(|r| resolve(r, &parent_dir(p)))
                .unwrap_or_default();
            let data = fit_data(&fits[0], &first, args.data.as_deref())?;
            let refs: Vec<&FitResult> = fits.iter().collect();
            share_rows("ma", &predict_ma_shares(&ma, &refs, &data)?)
        }
        (None, None) => return Err(CliError::usage("pass --fit or --ma")),
    };
    write_csv(&args.out.out.join(SHARES_FILE), &SHARES_HEADER, rows)
}

pub(crate) const WTP_HEADER: [&str; 9] = [
    "attribute",
    "family",
    "wtp",
    "lower",
    "upper",
    "mrs",
    "mrs_lower",
    "mrs_upper",
    "ci_method",
];

pub(crate) fn wtp_rows(rows: &[WtpRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            let method = serde_json::to_value(r.method)
                .ok()
                .and_then(|v| v.as_str().map(String::from));
            let ci = |v: f64| if v.is_finite() { fmt(v) } else { String::new() };
            vec![
                r.attribute.clone(),
                r.family.to_string(),
                fmt(r.mean),
                ci(r.lower),
                ci(r.upper),
                fmt(r.mrs_mean),
                ci(r.mrs_lower),
                ci(r.mrs_upper),
                method.unwrap_or_default(),
            ]
        })
        .collect()
}

fn wtp(args: &WtpArgs) -> CliResult<()> {
    let fit = load_fit(&args.fit)?;
    let rows = wtp_summary(&fit, args.seed)?;
    write_csv(&args.out.out.join(WTP_FILE), &WTP_HEADER, wtp_rows(&rows))
}

pub(crate) const DENSITY_HEADER: [&str; 6] =
    ["model", "coefficient", "bin", "center", "density", "width"];

pub(crate) fn density_rows(model: &str, coef: &str, grid: &DensityGrid) -> Vec<Vec<String>> {
    grid.centers()
        .into_iter()
        .zip(&grid.density)
        .enumerate()
        .map(|(i, (c, d))| {
            vec![
                model.to_string(),
                coef.to_string(),
                i.to_string(),
                fmt(c),
                fmt(*d),
                fmt(grid.width),
            ]
        })
        .collect()
}

pub(crate) fn draws_density_rows(
    model: &str,
    draws: &UnconditionalDraws,
    n_bins: usize,
) -> CliResult<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    for (coef, samples) in &draws.coefficients {
        rows.extend(density_rows(model, coef, &density_grid(samples, n_bins)?));
    }
    Ok(rows)
}

fn density(args: &DensityArgs) -> CliResult<()> {
    let n = args.samples as usize;
    let (model, draws) = match (&args.source.fit, &args.source.ma) {
        (Some(p), _) => {
            let fit = load_fit(p)?;
            (
                fit.label.clone(),
                sample_unconditionals(&fit, n, args.seed)?,
            )
        }
        (None, Some(p)) => {
            let (ma, fits) = load_ma(p)?;
            let refs: Vec<&FitResult> = fits.iter().collect();
            (
                "ma".to_string(),
                sample_ma_unconditionals(&ma, &refs, n, args.seed)?,
            )
        }
        (None, None) => return Err(CliError::usage("pass --fit or --ma")),
    };
    let rows = draws_density_rows(&model, &draws, args.bins as usize)?;
    write_csv(&args.out.out.join(DENSITY_FILE), &DENSITY_HEADER, rows)
}

/// Truth sample count used for recovery scoring.
pub(crate) const TRUTH_SAMPLES: usize = TRUTH_DENSITY_SAMPLES;
