//! Simulated maximum likelihood: BFGS ascent on finite-difference gradients,
//! Hessian-based standard errors and information criteria.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ChoiceDataset, CodingPlan, ColumnSchema};
use crate::mixing::{at_clamp_offset, Family};
use crate::models::{LogLik, Model, ModelError, ModelSpec, SimulationDraws, Space};

pub const FIT_FORMAT: &str = "mixl.fit/1";

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("objective is not finite at the starting values")]
    NonFiniteObjectiveAtStart,
    #[error("no step from the starting values improves the objective")]
    NoImprovingStep,
    #[error("start vector has {found} entries, model has {expected} parameters")]
    StartLength { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceStatus {
    Converged,
    MaxIter,
    LineSearchFailure,
}

impl ConvergenceStatus {
    pub fn is_converged(self) -> bool {
        self == ConvergenceStatus::Converged
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConvergenceStatus::Converged => "converged",
            ConvergenceStatus::MaxIter => "max_iter",
            ConvergenceStatus::LineSearchFailure => "line_search_failure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Gradient max-norm tolerance.
    pub grad_tol: f64,
    /// Relative objective change tolerance, `|Δf| / max(|f|, 1)`.
    pub rel_tol: f64,
    /// A stall on `rel_tol` counts as convergence only while the gradient
    /// max-norm is below `stall_grad_tol·max(|f|, 1)`.
    pub stall_grad_tol: f64,
    pub max_halvings: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            rel_tol: 1e-9,
            stall_grad_tol: 1e-3,
            max_halvings: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub status: ConvergenceStatus,
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central differences with step `max(1e-6, 1e-6·|x_i|)`.
pub fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = (1e-6 * x[i].abs()).max(1e-6);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = match (fp.is_finite(), fm.is_finite()) {
            (true, true) => (fp - fm) / (2.0 * h),
            // one side leaves the feasible region: fall back to a one-sided difference
            (true, false) => (fp - f(x)) / h,
            (false, true) => (f(x) - fm) / h,
            (false, false) => f64::NAN,
        };
    }
    g
}

/// Central finite-difference Hessian, step `1e-4·max(1, |x_i|)`.
pub fn fd_hessian(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect();
    let f0 = f(x);
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + h[i];
        let fp = f(&xp);
        xp[i] = x[i] - h[i];
        let fm = f(&xp);
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Standard errors from the Hessian of the log-likelihood: square roots of
/// the diagonal of `(−H)⁻¹`. Parameters in flat directions, or whose
/// variance comes out non-positive, are `None`.
pub fn std_errors_from_hessian(hess: &DMatrix<f64>) -> Vec<Option<f64>> {
    let n = hess.nrows();
    let scale = (0..n).fold(0.0f64, |m, i| m.max(hess[(i, i)].abs()));
    let keep: Vec<usize> = (0..n)
        .filter(|&i| {
            let row_max = (0..n).fold(0.0f64, |m, j| m.max(hess[(i, j)].abs()));
            hess[(i, i)].is_finite() && row_max > 1e-10 * scale.max(1e-300) && row_max > 1e-12
        })
        .collect();
    let mut out = vec![None; n];
    if keep.is_empty() {
        return out;
    }
    let info = DMatrix::from_fn(keep.len(), keep.len(), |a, b| -hess[(keep[a], keep[b])]);
    if info.iter().any(|v| !v.is_finite()) {
        return out;
    }
    let inv = match info.clone().cholesky() {
        Some(c) => Some(c.inverse()),
        None => info.lu().try_inverse(),
    };
    if let Some(inv) = inv {
        for (a, &i) in keep.iter().enumerate() {
            let var = inv[(a, a)];
            if var.is_finite() && var > 0.0 {
                out[i] = Some(var.sqrt());
            }
        }
    }
    out
}

/// `std_errors_from_hessian(fd_hessian(f, x))`.
pub fn std_errors(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<Option<f64>> {
    std_errors_from_hessian(&fd_hessian(f, x))
}

/// `(AIC, BIC) = (2k − 2LL, k·ln(n_obs) − 2LL)`.
pub fn fit_stats(ll: f64, k: usize, n_obs: usize) -> (f64, f64) {
    let k = k as f64;
    (2.0 * k - 2.0 * ll, k * (n_obs as f64).ln() - 2.0 * ll)
}

/// Something to maximize, with its gradient.
pub trait Objective {
    fn value(&mut self, x: &[f64]) -> f64;
    fn gradient(&mut self, x: &[f64]) -> Vec<f64>;
}

/// Wraps a plain function, differentiating by [`fd_gradient`].
pub struct FiniteDiff<F>(pub F);

impl<F: FnMut(&[f64]) -> f64> Objective for FiniteDiff<F> {
    fn value(&mut self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
    fn gradient(&mut self, x: &[f64]) -> Vec<f64> {
        fd_gradient(&mut self.0, x)
    }
}

/// BFGS ascent on `f` with finite-difference gradients.
pub fn maximize(
    f: &mut dyn FnMut(&[f64]) -> f64,
    start: &[f64],
    opts: &OptimOptions,
) -> Result<Optimum, EstimationError> {
    maximize_objective(&mut FiniteDiff(f), start, opts)
}

/// BFGS ascent.
///
/// Works on `−f` with an inverse-Hessian approximation, a backtracking
/// Armijo search (halving) and curvature-guarded updates. A failed search
/// first resets the approximation to the identity; only a failure straight
/// after a reset ends the run. Non-finite trial values count as rejected.
pub fn maximize_objective(
    obj: &mut dyn Objective,
    start: &[f64],
    opts: &OptimOptions,
) -> Result<Optimum, EstimationError> {
    let n = start.len();
    let mut x = start.to_vec();
    let mut fx = -obj.value(&x);
    if !fx.is_finite() {
        return Err(EstimationError::NonFiniteObjectiveAtStart);
    }
    let neg_grad = |obj: &mut dyn Objective, z: &[f64]| -> Vec<f64> {
        obj.gradient(z).into_iter().map(|v| -v).collect()
    };
    let mut g = neg_grad(obj, &x);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(EstimationError::NonFiniteObjectiveAtStart);
    }
    let identity = |h: &mut Vec<f64>| {
        h.iter_mut().for_each(|v| *v = 0.0);
        (0..n).for_each(|i| h[i * n + i] = 1.0);
    };
    let mut h = vec![0.0; n * n];
    identity(&mut h);
    let mut fresh = true;
    let mut accepted = 0usize;
    let mut stalls = 0;
    let mut iterations = 0;
    let mut status = ConvergenceStatus::MaxIter;

    while iterations < opts.max_iter {
        if n == 0 || max_norm(&g) < opts.grad_tol {
            status = ConvergenceStatus::Converged;
            break;
        }
        iterations += 1;
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&g, &d);
        if slope.is_nan() || slope >= 0.0 {
            identity(&mut h);
            fresh = true;
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        if fresh {
            // unscaled identity: keep the first trial step at unit length
            let s = 1.0 / max_norm(&d).max(1.0);
            d.iter_mut().for_each(|v| *v *= s);
            slope *= s;
        }

        let mut t = 1.0;
        let mut trial = None;
        for _ in 0..=opts.max_halvings {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let fnew = -obj.value(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * t * slope {
                let gn = neg_grad(obj, &xn);
                if gn.iter().all(|v| v.is_finite()) {
                    trial = Some((xn, fnew, gn));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn)) = trial else {
            if fresh {
                if accepted == 0 {
                    return Err(EstimationError::NoImprovingStep);
                }
                status = ConvergenceStatus::LineSearchFailure;
                break;
            }
            identity(&mut h);
            fresh = true;
            continue;
        };
        accepted += 1;

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 0.0 {
            if fresh {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v = 0.0);
                (0..n).for_each(|i| h[i * n + i] = scale);
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] +=
                        rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
        }

        let rel = (fx - fnew).abs() / fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        if rel < opts.rel_tol {
            stalls += 1;
            if stalls >= 2 {
                status = if max_norm(&g) <= opts.stall_grad_tol * fx.abs().max(1.0) {
                    ConvergenceStatus::Converged
                } else {
                    ConvergenceStatus::LineSearchFailure
                };
                break;
            }
        } else {
            stalls = 0;
        }
    }
    if iterations >= opts.max_iter && max_norm(&g) < opts.grad_tol {
        status = ConvergenceStatus::Converged;
    }
    Ok(Optimum {
        x,
        value: -fx,
        iterations,
        grad_norm: max_norm(&g),
        status,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub n_draws: usize,
    pub seed: u64,
    /// Total number of starts; extra starts perturb the primary one.
    pub multistart: usize,
    pub warm_start: bool,
    pub start: Option<Vec<f64>>,
    pub optim: OptimOptions,
    pub compute_std_errors: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_draws: 100,
            seed: 1,
            multistart: 1,
            warm_start: false,
            start: None,
            optim: OptimOptions::default(),
            compute_std_errors: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub name: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    /// The value to report: `|σ|` for scale parameters, otherwise the estimate.
    pub reported: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub status: ConvergenceStatus,
    pub iterations: usize,
    pub grad_norm: f64,
    pub starts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefFamily {
    pub coef: String,
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub seed: u64,
    pub n_draws: usize,
    pub space: Space,
    pub families: Vec<CoefFamily>,
}

/// Where the estimation data came from, so a fit can be re-evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub path: String,
    pub columns: ColumnSchema,
    #[serde(default)]
    pub coding: CodingPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub format: String,
    pub label: String,
    pub spec: ModelSpec,
    pub params: Vec<ParamEstimate>,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_obs: usize,
    pub k: usize,
    pub convergence: ConvergenceReport,
    pub fingerprint: Fingerprint,
    pub person_ids: Vec<String>,
    pub person_probs: Vec<f64>,
    pub floored: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSource>,
}

impl FitResult {
    pub fn theta(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.estimate).collect()
    }

    pub fn std_errors(&self) -> Vec<Option<f64>> {
        self.params.iter().map(|p| p.std_error).collect()
    }

    pub fn param(&self, name: &str) -> Option<&ParamEstimate> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn converged(&self) -> bool {
        self.convergence.status.is_converged()
    }

    /// Recompile the fitted spec against `data`.
    pub fn model(&self, data: &ChoiceDataset) -> Result<Model, ModelError> {
        Model::compile(&self.spec, data)
    }

    /// The estimation draws, regenerated from the fingerprint.
    pub fn draws(&self, model: &Model) -> Result<SimulationDraws, ModelError> {
        model.draws(self.fingerprint.n_draws, self.fingerprint.seed)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

fn is_scale_param(name: &str) -> bool {
    name.ends_with(".sigma")
}

/// Build a [`FitResult`] from an optimum.
pub fn summarize(
    model: &Model,
    draws: &SimulationDraws,
    opt: &Optimum,
    starts: usize,
    std_errors: Vec<Option<f64>>,
    label: &str,
    seed: u64,
) -> Result<FitResult, EstimationError> {
    let LogLik {
        ll,
        person_probs,
        floored,
    } = model.loglik(draws, &opt.x)?;
    let k = model.n_free();
    let (aic, bic) = fit_stats(ll, k, model.n_obs());
    let params = model
        .param_names()
        .into_iter()
        .zip(&opt.x)
        .zip(std_errors)
        .map(|((name, &estimate), std_error)| {
            let rp_scale = model
                .spec()
                .rp
                .as_ref()
                .is_some_and(|rp| rp.error_scale == name);
            let reported = if is_scale_param(&name) || rp_scale {
                estimate.abs()
            } else {
                estimate
            };
            ParamEstimate {
                name,
                estimate,
                std_error,
                reported,
            }
        })
        .collect();
    let spec = model.spec();
    Ok(FitResult {
        format: FIT_FORMAT.into(),
        label: label.into(),
        spec: spec.clone(),
        params,
        loglik: ll,
        aic,
        bic,
        n_obs: model.n_obs(),
        k,
        convergence: ConvergenceReport {
            status: opt.status,
            iterations: opt.iterations,
            grad_norm: opt.grad_norm,
            starts,
        },
        fingerprint: Fingerprint {
            seed,
            n_draws: draws.n_draws(),
            space: spec.space,
            families: spec
                .families()
                .into_iter()
                .map(|(coef, family)| CoefFamily { coef, family })
                .collect(),
        },
        person_ids: model.person_ids().to_vec(),
        person_probs,
        floored,
        data: None,
    })
}

/// Starting values whose coefficient means come from a fixed-coefficient
/// fit of the same specification.
pub fn warm_start(
    spec: &ModelSpec,
    data: &ChoiceDataset,
    opts: &FitOptions,
) -> Result<Vec<f64>, EstimationError> {
    let model = Model::compile(spec, data)?;
    let fixed = spec.fixed_counterpart();
    if fixed == *spec {
        return Ok(model.start_values());
    }
    let base = FitOptions {
        warm_start: false,
        start: None,
        multistart: 1,
        compute_std_errors: false,
        ..opts.clone()
    };
    let mnl = fit_model(&fixed, data, &base, "warm")?;
    let fixed_model = Model::compile(&fixed, data)?;
    let full = fixed_model.expand(&mnl.theta());
    let mut means = BTreeMap::new();
    let mut exact = BTreeMap::new();
    for (k, c) in fixed.coefficients.iter().enumerate() {
        let p = fixed_model.coefficient_params(&full, k);
        means.insert(c.name.clone(), c.family.analytic_mean(p, c.sign));
        exact.insert(c.name.clone(), (c.family, p.to_vec()));
    }
    if let Some(rp) = &fixed.rp {
        means.insert(rp.error_scale.clone(), full[full.len() - 1]);
    }
    Ok(model.warm_start_values(&means, &exact))
}

/// Fit `spec` to `data` by simulated maximum likelihood.
/// Orders free asymmetric-triangular endpoints and moves the offset onto the
/// support; the likelihood is symmetric in the endpoints and flat beyond it.
fn canonicalize_at(model: &Model, theta: &mut [f64]) {
    let names = model.param_names();
    let index = |n: String| names.iter().position(|x| *x == n);
    for m in model
        .spec()
        .coefficients
        .iter()
        .filter(|m| m.family == Family::AsymTriangular)
    {
        let (Some(a), Some(b), Some(c)) = (
            index(format!("{}.a", m.name)),
            index(format!("{}.b", m.name)),
            index(format!("{}.c", m.name)),
        ) else {
            continue;
        };
        if theta[a] > theta[b] {
            theta.swap(a, b);
        }
        theta[c] = at_clamp_offset(theta[a], theta[b], theta[c]);
    }
}

pub fn fit_model(
    spec: &ModelSpec,
    data: &ChoiceDataset,
    opts: &FitOptions,
    label: &str,
) -> Result<FitResult, EstimationError> {
    let model = Model::compile(spec, data)?;
    let draws = model.draws(opts.n_draws, opts.seed)?;
    let primary = match (&opts.start, opts.warm_start) {
        (Some(s), _) => {
            if s.len() != model.n_free() {
                return Err(EstimationError::StartLength {
                    expected: model.n_free(),
                    found: s.len(),
                });
            }
            s.clone()
        }
        (None, true) => warm_start(spec, data, opts)?,
        (None, false) => model.start_values(),
    };
    let mut f = |theta: &[f64]| model.loglik_value(&draws, theta);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut best: Option<Optimum> = None;
    let mut first_err = None;
    let starts = opts.multistart.max(1);
    for i in 0..starts {
        let x0: Vec<f64> = if i == 0 {
            primary.clone()
        } else {
            primary
                .iter()
                .map(|v| v + rng.gen_range(-0.5..0.5) * v.abs().max(1.0))
                .collect()
        };
        match maximize(&mut f, &x0, &opts.optim) {
            Ok(opt) => {
                let better = match &best {
                    None => true,
                    Some(b) => opt.value > b.value,
                };
                if better {
                    best = Some(opt);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let Some(mut opt) = best else {
        return Err(first_err.unwrap_or(EstimationError::NonFiniteObjectiveAtStart));
    };
    canonicalize_at(&model, &mut opt.x);
    let ses = if opts.compute_std_errors {
        std_errors(&mut f, &opt.x)
    } else {
        vec![None; opt.x.len()]
    };
    summarize(&model, &draws, &opt, starts, ses, label, opts.seed)
}
