//! The simulated-data experiment end to end.

use std::path::PathBuf;

use clap::Args;
use mixl_core::averaging::MAResult;
use mixl_core::estimation::{FitOptions, FitResult};
use mixl_core::mixing::Family;
use mixl_core::models::Space;
use mixl_core::postest::{
    predict_ma_shares, predict_shares, recovery_grids, recovery_score, sample_ma_unconditionals,
    sample_unconditionals, wtp_summary, UnconditionalDraws, DEFAULT_BINS,
};
use mixl_core::simgen::{truth_samples, SimConfig};

use crate::commands::{
    draws_density_rows, fit_file_name, fmt, run_estimates, share_rows, stream, warn, write_average,
    write_simulation, wtp_rows, EstimateJob, OutArg, ALL_FAMILIES, DATA_FILE, DENSITY_FILE,
    DENSITY_HEADER, SHARES_FILE, SHARES_HEADER, TRUTH_SAMPLES, TRUTH_STREAM, UNCONDITIONAL_STREAM,
    WTP_FILE, WTP_HEADER, WTP_STREAM,
};
use crate::error::{CliError, CliResult};
use crate::io::{write_csv, write_json};
use crate::specfile::{load_data, SpecFile};

pub const RECOVERY_FILE: &str = "recovery.csv";
pub const WTP_FIT_LABEL: &str = "wtp_normal";
/// Default averaging group: every family except the asymmetric triangle.
pub const MA_GROUP: [&str; 7] = [
    "normal",
    "uniform",
    "triangular",
    "lognormal",
    "loguniform",
    "fm2",
    "fm3",
];

#[derive(Debug, Clone, Args)]
pub struct ReplicateArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub persons: u64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub tasks: u64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub draws: u64,
    /// Unconditional draws per model for densities and recovery.
    #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long, default_value_t = DEFAULT_BINS as u64, value_parser = clap::value_parser!(u64).range(2..))]
    pub bins: u64,
    /// Families to estimate (comma separated).
    #[arg(long, value_delimiter = ',', default_values_t = ALL_FAMILIES.map(String::from))]
    pub families: Vec<String>,
    /// Families entering the averaged model (comma separated).
    #[arg(long, value_delimiter = ',', default_values_t = MA_GROUP.map(String::from))]
    pub ma_group: Vec<String>,
    /// Skip the WTP-space fit.
    #[arg(long)]
    pub no_wtp: bool,
    #[command(flatten)]
    pub out: OutArg,
}

impl ReplicateArgs {
    /// Defaults with the given output directory.
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            seed: 1,
            persons: 1000,
            tasks: 10,
            draws: 100,
            samples: 100_000,
            bins: DEFAULT_BINS as u64,
            families: ALL_FAMILIES.map(String::from).to_vec(),
            ma_group: MA_GROUP.map(String::from).to_vec(),
            no_wtp: false,
            out: OutArg { out: out.into() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub model: String,
    pub coefficient: String,
    pub l1: f64,
}

#[derive(Debug, Clone)]
pub struct Replication {
    pub fits: Vec<FitResult>,
    pub ma: Option<MAResult>,
    /// Shares per model, the averaged model last.
    pub shares: Vec<(String, Vec<(String, f64)>)>,
    pub recovery: Vec<Recovery>,
    pub wtp_fit: Option<FitResult>,
}

impl Replication {
    pub fn fit(&self, label: &str) -> Option<&FitResult> {
        self.fits.iter().find(|f| f.label == label)
    }

    pub fn l1(&self, model: &str, coefficient: &str) -> Option<f64> {
        self.recovery
            .iter()
            .find(|r| r.model == model && r.coefficient == coefficient)
            .map(|r| r.l1)
    }
}

fn parse_families(names: &[String]) -> CliResult<Vec<Family>> {
    names
        .iter()
        .map(|n| n.parse::<Family>().map_err(CliError::usage))
        .collect()
}

pub fn run(args: &ReplicateArgs) -> CliResult<Replication> {
    let out = &args.out.out;
    let families = parse_families(&args.families)?;
    parse_families(&args.ma_group)?;
    let config = SimConfig::default()
        .with_size(args.persons as usize, args.tasks as usize)
        .with_seed(args.seed);
    write_simulation(&config, out)?;

    let spec = SpecFile::simulated(Space::Preference);
    let data_path = out.join(DATA_FILE);
    let data = load_data(&data_path, &spec.columns, &spec.coding)?;
    let opts = FitOptions {
        n_draws: args.draws as usize,
        seed: args.seed,
        ..FitOptions::default()
    };
    let job = EstimateJob {
        spec: &spec,
        data: &data,
        data_path: &data_path,
        families: families.into_iter().map(Some).collect(),
        opts: opts.clone(),
        out,
    };
    let (fits, _) = run_estimates(&job)?;

    let group: Vec<FitResult> = fits
        .iter()
        .filter(|f| args.ma_group.contains(&f.label))
        .cloned()
        .collect();
    let ma = if group.len() >= 2 {
        let paths: Vec<PathBuf> = group
            .iter()
            .map(|f| out.join(fit_file_name(&f.label)))
            .collect();
        Some(write_average(&group, &paths, out, "ma")?)
    } else {
        warn("fewer than two fits in the averaging group; skipping the averaged model");
        None
    };
    let group_refs: Vec<&FitResult> = group.iter().collect();

    let mut shares = Vec::new();
    for f in &fits {
        shares.push((f.label.clone(), predict_shares(f, &data)?));
    }
    if let Some(ma) = &ma {
        shares.push(("ma".to_string(), predict_ma_shares(ma, &group_refs, &data)?));
    }
    let rows = shares.iter().flat_map(|(m, s)| share_rows(m, s));
    write_csv(&out.join(SHARES_FILE), &SHARES_HEADER, rows)?;

    let n = args.samples as usize;
    let useed = stream(args.seed, UNCONDITIONAL_STREAM);
    let mut draws: Vec<UnconditionalDraws> = Vec::new();
    for f in &fits {
        draws.push(sample_unconditionals(f, n, useed)?);
    }
    if let Some(ma) = &ma {
        draws.push(sample_ma_unconditionals(ma, &group_refs, n, useed)?);
    }
    let bins = args.bins as usize;
    let mut rows = Vec::new();
    for d in &draws {
        rows.extend(draws_density_rows(&d.source, d, bins)?);
    }
    write_csv(&out.join(DENSITY_FILE), &DENSITY_HEADER, rows)?;

    let truth = truth_samples(
        &config.truth,
        TRUTH_SAMPLES,
        stream(args.seed, TRUTH_STREAM),
    );
    let mut recovery = Vec::new();
    for d in &draws {
        for (coef, t) in &truth {
            let Some(est) = d.get(coef) else { continue };
            let (e, g) = recovery_grids(est, t, bins)?;
            recovery.push(Recovery {
                model: d.source.clone(),
                coefficient: coef.clone(),
                l1: recovery_score(&e, &g)?,
            });
        }
    }
    let rows = recovery
        .iter()
        .map(|r| vec![r.model.clone(), r.coefficient.clone(), fmt(r.l1)]);
    write_csv(
        &out.join(RECOVERY_FILE),
        &["model", "coefficient", "l1"],
        rows,
    )?;

    let wtp_fit = if args.no_wtp {
        None
    } else {
        Some(wtp_stage(args, &data, &data_path, &opts)?)
    };
    Ok(Replication {
        fits,
        ma,
        shares,
        recovery,
        wtp_fit,
    })
}

fn wtp_stage(
    args: &ReplicateArgs,
    data: &mixl_core::data::ChoiceDataset,
    data_path: &std::path::Path,
    opts: &FitOptions,
) -> CliResult<FitResult> {
    let out = &args.out.out;
    let mut spec = SpecFile::simulated(Space::Wtp);
    spec.model = spec.model.with_family(Family::Normal);
    let mut fit = mixl_core::estimation::fit_model(&spec.model, data, opts, WTP_FIT_LABEL)?;
    fit.data = Some(mixl_core::estimation::DataSource {
        path: crate::io::relative_to(data_path, out),
        columns: spec.columns.clone(),
        coding: spec.coding.clone(),
    });
    if !fit.converged() {
        warn(format!(
            "{WTP_FIT_LABEL}: {}",
            fit.convergence.status.as_str()
        ));
    }
    write_json(&out.join(fit_file_name(WTP_FIT_LABEL)), &fit)?;
    let rows = wtp_summary(&fit, stream(args.seed, WTP_STREAM))?;
    write_csv(&out.join(WTP_FILE), &WTP_HEADER, wtp_rows(&rows))?;
    Ok(fit)
}
