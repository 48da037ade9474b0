//! Post-estimation: predicted shares, unconditional coefficient draws,
//! WTP summaries and histogram density grids.

use rand::distributions::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::averaging::MAResult;
use crate::data::ChoiceDataset;
use crate::draws::{inverse_normal_cdf, DrawKind};
use crate::estimation::FitResult;
use crate::mixing::{realize_value, Family, MixingSpec};
use crate::models::{ModelError, Space};

pub const DEFAULT_BINS: usize = 100;
pub const WTP_REDRAWS: usize = 200;
const Z95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum PostestError {
    #[error("fit does not match the dataset: {0}")]
    SpecDataMismatch(#[from] ModelError),
    #[error("fit was not estimated in willingness-to-pay space")]
    NotWtpSpace,
    #[error("constituent {index} does not match the averaging result: {reason}")]
    ConstituentMismatch { index: usize, reason: String },
    #[error("need at least {min} {what}, got {found}")]
    TooFew {
        what: &'static str,
        min: usize,
        found: usize,
    },
    #[error("samples contain non-finite values")]
    NonFinite,
    #[error("density grids cover different bins")]
    GridMismatch,
}

pub type PostestResult<T> = Result<T, PostestError>;

/// Per-label shares by sample enumeration over persons, tasks and the
/// fit's own draws.
pub fn predict_shares(fit: &FitResult, data: &ChoiceDataset) -> PostestResult<Vec<(String, f64)>> {
    let model = fit.model(data)?;
    let draws = fit.draws(&model)?;
    Ok(model.shares(&draws, &fit.theta())?)
}

/// π-weighted shares of the constituents.
pub fn predict_ma_shares(
    ma: &MAResult,
    fits: &[&FitResult],
    data: &ChoiceDataset,
) -> PostestResult<Vec<(String, f64)>> {
    check_constituents(ma, fits)?;
    let mut out: Vec<(String, f64)> = Vec::new();
    for (fit, &w) in fits.iter().zip(&ma.weights) {
        let shares = predict_shares(fit, data)?;
        if out.is_empty() {
            out = shares.iter().map(|(l, _)| (l.clone(), 0.0)).collect();
        }
        for ((_, acc), (_, s)) in out.iter_mut().zip(shares) {
            *acc += w * s;
        }
    }
    Ok(out)
}

fn check_constituents(ma: &MAResult, fits: &[&FitResult]) -> PostestResult<()> {
    if fits.len() != ma.constituents.len() {
        return Err(PostestError::ConstituentMismatch {
            index: fits.len().min(ma.constituents.len()),
            reason: format!(
                "{} fits for {} constituents",
                fits.len(),
                ma.constituents.len()
            ),
        });
    }
    for (i, (f, c)) in fits.iter().zip(&ma.constituents).enumerate() {
        if f.k != c.k || (f.loglik - c.loglik).abs() > 1e-8 * c.loglik.abs().max(1.0) {
            return Err(PostestError::ConstituentMismatch {
                index: i,
                reason: format!(
                    "expected k={} LL={}, fit has k={} LL={}",
                    c.k, c.loglik, f.k, f.loglik
                ),
            });
        }
        if f.person_ids != ma.person_ids {
            return Err(PostestError::ConstituentMismatch {
                index: i,
                reason: "person ids differ".into(),
            });
        }
    }
    Ok(())
}

/// Each coefficient's spec with its full parameter slice (pinned entries
/// filled in).
pub fn coefficient_params(fit: &FitResult) -> Vec<(MixingSpec, Vec<f64>)> {
    let mut theta = fit.theta().into_iter();
    fit.spec
        .coefficients
        .iter()
        .map(|c| {
            let p = c
                .free_mask()
                .into_iter()
                .map(|free| {
                    if free {
                        theta.next().unwrap_or(0.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            (c.clone(), p)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnconditionalDraws {
    pub source: String,
    pub n_samples: usize,
    pub coefficients: Vec<(String, Vec<f64>)>,
    /// For averaged models, the constituent chosen for each sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<usize>>,
}

impl UnconditionalDraws {
    pub fn get(&self, coef: &str) -> Option<&[f64]> {
        self.coefficients
            .iter()
            .find(|(n, _)| n == coef)
            .map(|(_, v)| v.as_slice())
    }
}

fn draw_one(spec: &MixingSpec, params: &[f64], rng: &mut ChaCha8Rng, buf: &mut [f64; 2]) -> f64 {
    let dims = spec.family.draw_dims();
    for b in buf.iter_mut().take(dims) {
        let u: f64 = Open01.sample(rng);
        *b = match spec.family.draw_kind() {
            Some(DrawKind::StdNormal) => inverse_normal_cdf(u),
            _ => u,
        };
    }
    realize_value(spec.family, spec.sign, params, &buf[..dims])
}

/// Fresh pseudo-random draws through each coefficient's transform at θ̂.
pub fn sample_unconditionals(
    fit: &FitResult,
    n_samples: usize,
    seed: u64,
) -> PostestResult<UnconditionalDraws> {
    if n_samples == 0 {
        return Err(PostestError::TooFew {
            what: "samples",
            min: 1,
            found: 0,
        });
    }
    let coefs = coefficient_params(fit);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n_samples); coefs.len()];
    let mut buf = [0.0; 2];
    for _ in 0..n_samples {
        for ((spec, p), col) in coefs.iter().zip(&mut cols) {
            col.push(draw_one(spec, p, &mut rng, &mut buf));
        }
    }
    if cols.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PostestError::NonFinite);
    }
    Ok(UnconditionalDraws {
        source: fit.label.clone(),
        n_samples,
        coefficients: coefs.into_iter().map(|(s, _)| s.name).zip(cols).collect(),
        components: None,
    })
}

/// Per sample: pick constituent k with probability π_k, then draw from it.
pub fn sample_ma_unconditionals(
    ma: &MAResult,
    fits: &[&FitResult],
    n_samples: usize,
    seed: u64,
) -> PostestResult<UnconditionalDraws> {
    if n_samples == 0 {
        return Err(PostestError::TooFew {
            what: "samples",
            min: 1,
            found: 0,
        });
    }
    check_constituents(ma, fits)?;
    let per_fit: Vec<Vec<(MixingSpec, Vec<f64>)>> =
        fits.iter().map(|f| coefficient_params(f)).collect();
    let names: Vec<String> = per_fit[0].iter().map(|(s, _)| s.name.clone()).collect();
    // align every constituent to the first one's coefficient order
    let mut aligned = Vec::with_capacity(fits.len());
    for (i, coefs) in per_fit.iter().enumerate() {
        let mut row = Vec::with_capacity(names.len());
        for n in &names {
            let c = coefs.iter().find(|(s, _)| &s.name == n).ok_or_else(|| {
                PostestError::ConstituentMismatch {
                    index: i,
                    reason: format!("no coefficient `{n}`"),
                }
            })?;
            row.push(c.clone());
        }
        aligned.push(row);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n_samples); names.len()];
    let mut picks = Vec::with_capacity(n_samples);
    let mut buf = [0.0; 2];
    for _ in 0..n_samples {
        let u: f64 = rng.gen();
        let mut k = ma.weights.len() - 1;
        let mut acc = 0.0;
        for (j, w) in ma.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        picks.push(k);
        for ((spec, p), col) in aligned[k].iter().zip(&mut cols) {
            col.push(draw_one(spec, p, &mut rng, &mut buf));
        }
    }
    if cols.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PostestError::NonFinite);
    }
    Ok(UnconditionalDraws {
        source: "ma".into(),
        n_samples,
        coefficients: names.into_iter().zip(cols).collect(),
        components: Some(picks),
    })
}

/// `est ± 1.96·se`.
pub fn normal_ci(estimate: f64, se: f64) -> (f64, f64) {
    (estimate - Z95 * se, estimate + Z95 * se)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    /// Location parameter ± 1.96·SE.
    StdError,
    /// Spread of the analytic mean over parametric re-draws of θ̂.
    Redraw,
    /// No standard errors available.
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WtpRow {
    pub attribute: String,
    pub family: Family,
    /// Mean of the estimated coefficient `w`.
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    /// The same quantities read as marginal rates of substitution, `−w`.
    pub mrs_mean: f64,
    pub mrs_lower: f64,
    pub mrs_upper: f64,
    pub method: CiMethod,
}

/// Mean WTP and 95% CI for every non-price coefficient of a WTP-space fit.
pub fn wtp_summary(fit: &FitResult, seed: u64) -> PostestResult<Vec<WtpRow>> {
    if fit.spec.space != Space::Wtp {
        return Err(PostestError::NotWtpSpace);
    }
    let price = fit.spec.price_coef().unwrap_or_default().to_string();
    let coefs = coefficient_params(fit);
    let ses = coefficient_ses(fit);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for ((spec, p), se) in coefs.iter().zip(&ses) {
        if spec.name == price {
            continue;
        }
        let mean = spec.family.analytic_mean(p, spec.sign);
        let (lower, upper, method) = match spec.family {
            Family::Fixed | Family::Normal => match se[0] {
                Some(s) => {
                    let (l, u) = normal_ci(p[0], s);
                    (l, u, CiMethod::StdError)
                }
                None => (mean, mean, CiMethod::Unavailable),
            },
            _ if se.iter().all(Option::is_none) => (mean, mean, CiMethod::Unavailable),
            _ => {
                let mut means = Vec::with_capacity(WTP_REDRAWS);
                let mut q = p.clone();
                for _ in 0..WTP_REDRAWS {
                    for ((qi, pi), si) in q.iter_mut().zip(p).zip(se) {
                        let z = inverse_normal_cdf(Open01.sample(&mut rng));
                        *qi = pi + si.unwrap_or(0.0) * z;
                    }
                    let m = spec.family.analytic_mean(&q, spec.sign);
                    if m.is_finite() {
                        means.push(m);
                    }
                }
                let sd = sample_sd(&means);
                (mean - Z95 * sd, mean + Z95 * sd, CiMethod::Redraw)
            }
        };
        rows.push(WtpRow {
            attribute: spec.name.clone(),
            family: spec.family,
            mean,
            lower,
            upper,
            mrs_mean: -mean,
            mrs_lower: -upper,
            mrs_upper: -lower,
            method,
        });
    }
    Ok(rows)
}

/// Standard errors aligned with [`coefficient_params`]; pinned entries are `Some(0)`.
fn coefficient_ses(fit: &FitResult) -> Vec<Vec<Option<f64>>> {
    let mut ses = fit.std_errors().into_iter();
    fit.spec
        .coefficients
        .iter()
        .map(|c| {
            c.free_mask()
                .into_iter()
                .map(|free| {
                    if free {
                        ses.next().flatten()
                    } else {
                        Some(0.0)
                    }
                })
                .collect()
        })
        .collect()
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Equal-width histogram density. A single bin marks a degenerate spike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub lower: f64,
    pub width: f64,
    pub density: Vec<f64>,
}

impl DensityGrid {
    pub fn n_bins(&self) -> usize {
        self.density.len()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins())
            .map(|i| self.lower + (i as f64 + 0.5) * self.width)
            .collect()
    }

    /// `Σ density · width`.
    pub fn integral(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.width
    }

    pub fn is_spike(&self) -> bool {
        self.n_bins() == 1
    }

    fn spike(v: f64) -> Self {
        let width = v.abs().max(1.0) * 1e-6;
        Self {
            lower: v - width / 2.0,
            width,
            density: vec![1.0 / width],
        }
    }

    /// Histogram of `samples` over `[lower, lower + n_bins·width)`; the top
    /// edge is closed. Samples outside are dropped but still counted in the
    /// normalization.
    pub fn histogram(samples: &[f64], lower: f64, width: f64, n_bins: usize) -> Self {
        let mut counts = vec![0usize; n_bins];
        for &x in samples {
            let pos = (x - lower) / width;
            if pos >= 0.0 && pos <= n_bins as f64 {
                counts[(pos as usize).min(n_bins - 1)] += 1;
            }
        }
        let norm = samples.len() as f64 * width;
        Self {
            lower,
            width,
            density: counts.into_iter().map(|c| c as f64 / norm).collect(),
        }
    }
}

fn finite_range(samples: &[f64]) -> PostestResult<(f64, f64)> {
    if samples.is_empty() {
        return Err(PostestError::TooFew {
            what: "samples",
            min: 1,
            found: 0,
        });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(PostestError::NonFinite);
    }
    Ok(samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        }))
}

fn padded_grid(samples: &[f64], lo: f64, hi: f64, n_bins: usize) -> DensityGrid {
    let pad = 0.05 * (hi - lo);
    let (mut lower, mut upper) = (lo - pad, hi + pad);
    // one-signed samples keep a one-signed grid
    if hi < 0.0 {
        upper = upper.min(0.0);
    }
    if lo > 0.0 {
        lower = lower.max(0.0);
    }
    DensityGrid::histogram(samples, lower, (upper - lower) / n_bins as f64, n_bins)
}

/// Histogram over `[min, max]` padded by 5% on each side, never padding
/// across zero.
pub fn density_grid(samples: &[f64], n_bins: usize) -> PostestResult<DensityGrid> {
    if n_bins < 2 {
        return Err(PostestError::TooFew {
            what: "bins",
            min: 2,
            found: n_bins,
        });
    }
    let (lo, hi) = finite_range(samples)?;
    if lo == hi {
        return Ok(DensityGrid::spike(lo));
    }
    Ok(padded_grid(samples, lo, hi, n_bins))
}

/// Grids for comparing `estimated` against `truth`: both histogrammed on the
/// truth's padded range, so heavy estimated tails cannot coarsen the bins.
/// Estimated mass beyond the range is left out of the grid and picked up by
/// [`recovery_score`].
pub fn recovery_grids(
    estimated: &[f64],
    truth: &[f64],
    n_bins: usize,
) -> PostestResult<(DensityGrid, DensityGrid)> {
    if n_bins < 2 {
        return Err(PostestError::TooFew {
            what: "bins",
            min: 2,
            found: n_bins,
        });
    }
    finite_range(estimated)?;
    let (lo, hi) = finite_range(truth)?;
    if lo == hi {
        let t = DensityGrid::spike(lo);
        let e = DensityGrid::histogram(estimated, t.lower, t.width, 1);
        return Ok((e, t));
    }
    let t = padded_grid(truth, lo, hi, n_bins);
    let e = DensityGrid::histogram(estimated, t.lower, t.width, n_bins);
    Ok((e, t))
}

/// L1 distance `Σ |f̂ − f|·width` between grids on identical bins, plus the
/// mass of either density that fell outside the bins. Lies in `[0, 2]`.
pub fn recovery_score(estimated: &DensityGrid, truth: &DensityGrid) -> PostestResult<f64> {
    let same = estimated.n_bins() == truth.n_bins()
        && (estimated.lower - truth.lower).abs() <= 1e-12 * truth.lower.abs().max(1.0)
        && (estimated.width - truth.width).abs() <= 1e-12 * truth.width.abs();
    if !same {
        return Err(PostestError::GridMismatch);
    }
    let inside = estimated
        .density
        .iter()
        .zip(&truth.density)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        * truth.width;
    let outside = (1.0 - estimated.integral()).max(0.0) + (1.0 - truth.integral()).max(0.0);
    Ok((inside + outside).min(2.0))
}
