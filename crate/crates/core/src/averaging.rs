//! Sequential latent-class model averaging.
//!
//! Constituent models are fitted first and frozen; only the class weights
//! `π_k = exp(θ_k) / Σ_j exp(θ_j)` (θ₁ = 0) are estimated, by maximizing
//! `LL_MA = Σ_n ln Σ_k π_k P_nk`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::{
    maximize_objective, ConvergenceStatus, EstimationError, FitResult, Objective, OptimOptions,
};

pub const MA_FORMAT: &str = "mixl.ma/1";

/// Stand-in for ±∞ in θ when a constituent takes all the weight.
const VERTEX_THETA: f64 = 800.0;

#[derive(Debug, Error)]
pub enum AveragingError {
    #[error("no constituent models given")]
    Empty,
    #[error("model `{model}` covers a different person set than `{reference}`")]
    PersonSetMismatch { model: String, reference: String },
    #[error("model `{0}` carries no per-person likelihoods")]
    MissingPersonLikelihoods(String),
    #[error("likelihood of person {person} under model `{model}` is {value}, must be positive")]
    NonPositiveLikelihood {
        person: String,
        model: String,
        value: f64,
    },
    #[error(transparent)]
    Estimation(#[from] EstimationError),
}

/// Person × model likelihood matrix, `values[n * k + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMatrix {
    pub person_ids: Vec<String>,
    pub model_ids: Vec<String>,
    values: Vec<f64>,
}

impl LikelihoodMatrix {
    pub fn from_rows(
        person_ids: Vec<String>,
        model_ids: Vec<String>,
        rows: &[Vec<f64>],
    ) -> Result<Self, AveragingError> {
        let k = model_ids.len();
        if k == 0 {
            return Err(AveragingError::Empty);
        }
        let mut values = Vec::with_capacity(rows.len() * k);
        for (n, row) in rows.iter().enumerate() {
            assert_eq!(
                row.len(),
                k,
                "row {n} has {} entries, expected {k}",
                row.len()
            );
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v <= 0.0 {
                    return Err(AveragingError::NonPositiveLikelihood {
                        person: person_ids.get(n).cloned().unwrap_or_else(|| n.to_string()),
                        model: model_ids[j].clone(),
                        value: v,
                    });
                }
            }
            values.extend_from_slice(row);
        }
        Ok(Self {
            person_ids,
            model_ids,
            values,
        })
    }

    pub fn n_persons(&self) -> usize {
        self.person_ids.len()
    }

    pub fn n_models(&self) -> usize {
        self.model_ids.len()
    }

    pub fn get(&self, n: usize, k: usize) -> f64 {
        self.values[n * self.n_models() + k]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n_persons()).map(|n| self.get(n, k)).collect()
    }
}

/// Collect the per-person likelihoods of `fits` (labelled by `ids`).
pub fn stack(ids: &[String], fits: &[&FitResult]) -> Result<LikelihoodMatrix, AveragingError> {
    let first = fits.first().ok_or(AveragingError::Empty)?;
    for (id, f) in ids.iter().zip(fits) {
        if f.person_probs.is_empty() {
            return Err(AveragingError::MissingPersonLikelihoods(id.clone()));
        }
        if f.person_ids != first.person_ids || f.person_probs.len() != f.person_ids.len() {
            return Err(AveragingError::PersonSetMismatch {
                model: id.clone(),
                reference: ids[0].clone(),
            });
        }
    }
    let rows: Vec<Vec<f64>> = (0..first.person_ids.len())
        .map(|n| fits.iter().map(|f| f.person_probs[n]).collect())
        .collect();
    LikelihoodMatrix::from_rows(first.person_ids.clone(), ids.to_vec(), &rows)
}

/// `π = softmax(θ)`, computed with the maximum subtracted.
pub fn softmax_weights(theta: &[f64]) -> Vec<f64> {
    let m = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|t| (t - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct MaObjective<'a> {
    ln_m: Vec<f64>,
    m: &'a LikelihoodMatrix,
}

impl MaObjective<'_> {
    fn full_theta(x: &[f64]) -> Vec<f64> {
        std::iter::once(0.0).chain(x.iter().cloned()).collect()
    }

    /// Per-person `ln Σ_k π_k M_nk` and, optionally, responsibilities.
    fn eval(&self, theta: &[f64], mut resp: Option<&mut Vec<f64>>) -> Vec<f64> {
        let k = self.m.n_models();
        let tm = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse_theta = tm + theta.iter().map(|t| (t - tm).exp()).sum::<f64>().ln();
        let mut out = Vec::with_capacity(self.m.n_persons());
        let mut a = vec![0.0; k];
        for n in 0..self.m.n_persons() {
            for j in 0..k {
                a[j] = theta[j] - lse_theta + self.ln_m[n * k + j];
            }
            let am = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = a.iter().map(|v| (v - am).exp()).sum();
            let l = am + s.ln();
            if let Some(r) = resp.as_deref_mut() {
                r.extend(a.iter().map(|v| (v - l).exp()));
            }
            out.push(l);
        }
        out
    }
}

impl Objective for MaObjective<'_> {
    fn value(&mut self, x: &[f64]) -> f64 {
        self.eval(&Self::full_theta(x), None).iter().sum()
    }

    /// `∂LL/∂θ_j = Σ_n (r_nj − π_j)`.
    fn gradient(&mut self, x: &[f64]) -> Vec<f64> {
        let theta = Self::full_theta(x);
        let k = theta.len();
        let pi = softmax_weights(&theta);
        let mut r = Vec::with_capacity(self.m.n_persons() * k);
        self.eval(&theta, Some(&mut r));
        (1..k)
            .map(|j| (0..self.m.n_persons()).map(|n| r[n * k + j] - pi[j]).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constituent {
    pub id: String,
    /// Artifact path, relative to the averaging artifact's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub k: usize,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MAResult {
    pub format: String,
    pub constituents: Vec<Constituent>,
    pub theta: Vec<f64>,
    pub weights: Vec<f64>,
    pub loglik: f64,
    /// Conservative parameter count: all constituent parameters plus K − 1.
    pub k: usize,
    pub aic: f64,
    pub status: ConvergenceStatus,
    pub iterations: usize,
    pub person_ids: Vec<String>,
    pub person_probs: Vec<f64>,
}

impl MAResult {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// Constituent artifact paths resolved against `base` (the directory of
    /// the averaging artifact).
    pub fn constituent_paths(&self, base: &Path) -> Vec<Option<PathBuf>> {
        self.constituents
            .iter()
            .map(|c| c.path.as_ref().map(|p| base.join(p)))
            .collect()
    }
}

/// `(k, AIC)` with `k = Σ k_i + (K − 1)`.
pub fn ma_fit_stats(ll_ma: f64, constituent_ks: &[usize]) -> (usize, f64) {
    let k = constituent_ks.iter().sum::<usize>() + constituent_ks.len().saturating_sub(1);
    (k, 2.0 * k as f64 - 2.0 * ll_ma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEstimate {
    /// θ with θ₁ = 0.
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub status: ConvergenceStatus,
    pub iterations: usize,
    /// Per-person `ln Σ_k π_k M_nk`.
    pub person_logliks: Vec<f64>,
}

impl WeightEstimate {
    pub fn weights(&self) -> Vec<f64> {
        softmax_weights(&self.theta)
    }
}

/// Maximize `LL_MA` over θ₂..θ_K from θ = 0, then compare against each pure
/// constituent so the result never falls below the best single model.
pub fn estimate_weights(m: &LikelihoodMatrix) -> Result<WeightEstimate, AveragingError> {
    let k = m.n_models();
    let mut obj = MaObjective {
        ln_m: m.values.iter().map(|v| v.ln()).collect(),
        m,
    };
    if k == 1 {
        let theta = vec![0.0];
        let per = obj.eval(&theta, None);
        return Ok(WeightEstimate {
            theta,
            loglik: per.iter().sum(),
            status: ConvergenceStatus::Converged,
            iterations: 0,
            person_logliks: per,
        });
    }
    let opts = OptimOptions {
        rel_tol: 0.0,
        ..OptimOptions::default()
    };
    let opt = maximize_objective(&mut obj, &vec![0.0; k - 1], &opts)?;
    let mut theta = MaObjective::full_theta(&opt.x);
    let mut ll = opt.value;
    let mut status = opt.status;
    for j in 0..k {
        let vertex: Vec<f64> = (0..k)
            .map(|i| if i == j { VERTEX_THETA } else { 0.0 })
            .collect();
        let shifted: Vec<f64> = vertex.iter().map(|v| v - vertex[0]).collect();
        let v: f64 = obj.eval(&shifted, None).iter().sum();
        if v > ll + 1e-9 {
            ll = v;
            theta = shifted;
            status = ConvergenceStatus::Converged;
        }
    }
    let per = obj.eval(&theta, None);
    Ok(WeightEstimate {
        theta,
        loglik: ll,
        status,
        iterations: opt.iterations,
        person_logliks: per,
    })
}

/// Average `fits` (labelled by `ids`).
pub fn average(ids: &[String], fits: &[&FitResult]) -> Result<MAResult, AveragingError> {
    let m = stack(ids, fits)?;
    let w = estimate_weights(&m)?;
    let ks: Vec<usize> = fits.iter().map(|f| f.k).collect();
    let (k, aic) = ma_fit_stats(w.loglik, &ks);
    Ok(MAResult {
        format: MA_FORMAT.into(),
        constituents: ids
            .iter()
            .zip(fits)
            .map(|(id, f)| Constituent {
                id: id.clone(),
                path: None,
                k: f.k,
                loglik: f.loglik,
            })
            .collect(),
        weights: w.weights(),
        theta: w.theta,
        loglik: w.loglik,
        k,
        aic,
        status: w.status,
        iterations: w.iterations,
        person_ids: m.person_ids.clone(),
        person_probs: w.person_logliks.into_iter().map(f64::exp).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[Vec<f64>]) -> LikelihoodMatrix {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        let models = (0..rows[0].len()).map(|i| format!("m{i}")).collect();
        LikelihoodMatrix::from_rows(ids, models, rows).unwrap()
    }

    #[test]
    fn identical_columns_keep_equal_weights() {
        let m = matrix(&[vec![0.3, 0.3], vec![0.6, 0.6]]);
        assert_eq!(estimate_weights(&m).unwrap().weights(), vec![0.5, 0.5]);
    }

    #[test]
    fn zero_theta_gives_uniform_weights() {
        assert_eq!(softmax_weights(&[0.0, 0.0, 0.0, 0.0]), vec![0.25; 4]);
    }

    #[test]
    fn toy_matrix_matches_grid() {
        let rows = vec![vec![0.9, 0.1], vec![0.9, 0.1], vec![0.1, 0.9]];
        let m = matrix(&rows);
        let w = estimate_weights(&m).unwrap();
        let (pi, ll) = (w.weights(), w.loglik);
        let mut best = (0.0, f64::NEG_INFINITY);
        for i in 0..=10_000 {
            let p = i as f64 / 10_000.0;
            let v: f64 = rows
                .iter()
                .map(|r| (p * r[0] + (1.0 - p) * r[1]).ln())
                .sum();
            if v > best.1 {
                best = (p, v);
            }
        }
        assert!((pi[0] - best.0).abs() < 1e-3, "{pi:?} vs {best:?}");
        assert!(ll >= best.1 - 1e-9);
    }

    #[test]
    fn dominated_model_gets_no_weight() {
        let m = matrix(&[vec![0.9, 0.1], vec![0.8, 0.2], vec![0.7, 0.3]]);
        let w = estimate_weights(&m).unwrap();
        let best: f64 = [0.9f64, 0.8, 0.7].iter().map(|v| v.ln()).sum();
        assert!(w.loglik >= best - 1e-6);
        assert!(w.weights()[0] > 0.999);
    }

    #[test]
    fn conservative_aic() {
        assert_eq!(ma_fit_stats(-100.0, &[5, 5]), (11, 222.0));
        assert_eq!(ma_fit_stats(-50.0, &[4, 6, 8]), (20, 140.0));
        assert_eq!(ma_fit_stats(-100.0, &[5]), (5, 210.0));
    }

    #[test]
    fn non_positive_rejected() {
        let r = LikelihoodMatrix::from_rows(vec!["a".into()], vec!["m".into()], &[vec![0.0]]);
        assert!(matches!(
            r,
            Err(AveragingError::NonPositiveLikelihood { .. })
        ));
    }
}
