//! Mixing distributions: maps structural parameters and draws to coefficient
//! realizations.
//!
//! | family       | params          | draws          | realization                         |
//! |--------------|-----------------|----------------|-------------------------------------|
//! | `fixed`      | β               | none           | β                                   |
//! | `normal`     | μ, σ            | 1 std normal   | μ + σ·d                             |
//! | `uniform`    | a, b            | 1 uniform      | a + b·d                             |
//! | `triangular` | a, b            | 2 uniform      | a + b·(d₁ + d₂), support [a, a+2b]  |
//! | `lognormal`  | μ, σ            | 1 std normal   | −exp(μ + σ·d)                       |
//! | `loguniform` | a, b            | 1 uniform      | −exp(a + b·d)                       |
//! | `at`         | a, b, c         | 1 uniform      | inverse CDF on [a, b], mode (a+b)/2 + c |
//! | `fm2`, `fm3` | μ, σ₁..σ_P      | 1 uniform      | μ + Σ σ_p·d^p                       |
//!
//! Log-transformed families are negative unless the coefficient's sign is
//! set to `positive`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::draws::{DrawBlock, DrawKind};

#[derive(Debug, Error, PartialEq)]
pub enum MixingError {
    #[error("unknown mixing family `{0}`")]
    UnknownFamily(String),
    #[error("{family} expects {expected} parameters, got {found}")]
    ArityMismatch {
        family: Family,
        expected: usize,
        found: usize,
    },
    #[error("{family} consumes {expected:?} draws, got {found:?}")]
    WrongDrawKind {
        family: Family,
        expected: DrawKind,
        found: DrawKind,
    },
    #[error("draw dimension {dim} out of range for a block with {n_dims} dimensions")]
    DimensionOutOfRange { dim: usize, n_dims: usize },
    #[error("asymmetric triangular support is empty: a = {a} ≥ b = {b}")]
    DegenerateSupport { a: f64, b: f64 },
    #[error("asymmetric triangular mode {mode} lies outside [{a}, {b}]")]
    ModeOutOfSupport { a: f64, b: f64, mode: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Family {
    Fixed,
    Normal,
    Uniform,
    Triangular,
    LogNormal,
    LogUniform,
    AsymTriangular,
    /// Fosgerau–Mabit polynomial in a uniform draw; order is 2 or 3.
    FmPoly(u8),
}

impl Family {
    /// The eight mixed families, in reporting order.
    pub const MIXED: [Family; 8] = [
        Family::Normal,
        Family::Uniform,
        Family::Triangular,
        Family::LogNormal,
        Family::LogUniform,
        Family::AsymTriangular,
        Family::FmPoly(2),
        Family::FmPoly(3),
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Fixed => "fixed",
            Family::Normal => "normal",
            Family::Uniform => "uniform",
            Family::Triangular => "triangular",
            Family::LogNormal => "lognormal",
            Family::LogUniform => "loguniform",
            Family::AsymTriangular => "at",
            Family::FmPoly(2) => "fm2",
            Family::FmPoly(_) => "fm3",
        }
    }

    pub fn param_labels(&self) -> &'static [&'static str] {
        match self {
            Family::Fixed => &[""],
            Family::Normal | Family::LogNormal => &["mu", "sigma"],
            Family::Uniform | Family::Triangular | Family::LogUniform => &["a", "b"],
            Family::AsymTriangular => &["a", "b", "c"],
            Family::FmPoly(2) => &["mu", "s1", "s2"],
            Family::FmPoly(_) => &["mu", "s1", "s2", "s3"],
        }
    }

    pub fn arity(&self) -> usize {
        self.param_labels().len()
    }

    /// Number of draw dimensions the family consumes.
    pub fn draw_dims(&self) -> usize {
        match self {
            Family::Fixed => 0,
            Family::Triangular => 2,
            _ => 1,
        }
    }

    pub fn draw_kind(&self) -> Option<DrawKind> {
        match self {
            Family::Fixed => None,
            Family::Normal | Family::LogNormal => Some(DrawKind::StdNormal),
            _ => Some(DrawKind::Uniform01),
        }
    }

    pub fn is_mixed(&self) -> bool {
        *self != Family::Fixed
    }

    /// Default starting values: location at zero, spread parameters 0.1,
    /// log-family location at ln 0.5.
    pub fn default_start(&self) -> Vec<f64> {
        match self {
            Family::Fixed => vec![0.0],
            Family::Normal => vec![0.0, 0.1],
            Family::Uniform => vec![-0.05, 0.1],
            Family::Triangular => vec![-0.1, 0.1],
            Family::LogNormal | Family::LogUniform => vec![0.5f64.ln(), 0.1],
            Family::AsymTriangular => vec![-0.1, 0.1, 0.0],
            Family::FmPoly(p) => {
                let mut v = vec![0.1; *p as usize + 1];
                v[0] = 0.0;
                v
            }
        }
    }

    /// Starting values whose implied mean is `mean` (warm start from a
    /// fixed-coefficient fit). Log families fall back to the default start
    /// when `mean` has the wrong sign.
    pub fn warm_start(&self, mean: f64, sign: Sign) -> Vec<f64> {
        let mut v = self.default_start();
        match self {
            Family::Fixed | Family::Normal => v[0] = mean,
            Family::Uniform => v[0] = mean - v[1] / 2.0,
            Family::Triangular => v[0] = mean - v[1],
            Family::LogNormal => {
                let m = sign.apply(mean);
                if m > 1e-3 {
                    v[0] = m.ln() - v[1] * v[1] / 2.0;
                }
            }
            Family::LogUniform => {
                let m = sign.apply(mean);
                if m > 1e-3 {
                    v[0] = m.ln() - (v[1].exp_m1() / v[1]).ln();
                }
            }
            Family::AsymTriangular => {
                v[0] = mean - 0.1;
                v[1] = mean + 0.1;
            }
            Family::FmPoly(_) => {
                v[0] = mean
                    - v[1..]
                        .iter()
                        .enumerate()
                        .map(|(i, s)| s / (i as f64 + 2.0))
                        .sum::<f64>();
            }
        }
        v
    }

    /// Population mean of the realized coefficient at `params`.
    pub fn analytic_mean(&self, params: &[f64], sign: Sign) -> f64 {
        match self {
            Family::Fixed | Family::Normal => params[0],
            Family::Uniform => params[0] + params[1] / 2.0,
            Family::Triangular => params[0] + params[1],
            Family::LogNormal => sign.apply((params[0] + params[1] * params[1] / 2.0).exp()),
            Family::LogUniform => {
                let (a, b) = (params[0], params[1]);
                let m = if b.abs() < 1e-12 {
                    a.exp()
                } else {
                    ((a + b).exp() - a.exp()) / b
                };
                sign.apply(m)
            }
            Family::AsymTriangular => {
                let (a, b) = (params[0].min(params[1]), params[0].max(params[1]));
                (a + b + at_mode(a, b, at_clamp_offset(a, b, params[2]))) / 3.0
            }
            Family::FmPoly(p) => {
                params[0]
                    + (1..=*p as usize)
                        .map(|k| params[k] / (k as f64 + 1.0))
                        .sum::<f64>()
            }
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = MixingError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "fixed" => Family::Fixed,
            "normal" => Family::Normal,
            "uniform" => Family::Uniform,
            "triangular" => Family::Triangular,
            "lognormal" => Family::LogNormal,
            "loguniform" => Family::LogUniform,
            "at" => Family::AsymTriangular,
            "fm2" => Family::FmPoly(2),
            "fm3" => Family::FmPoly(3),
            other => return Err(MixingError::UnknownFamily(other.into())),
        })
    }
}

impl TryFrom<String> for Family {
    type Error = MixingError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Family> for String {
    fn from(f: Family) -> String {
        f.as_str().into()
    }
}

/// Direction of the log-transformed families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    #[default]
    Negative,
    Positive,
}

impl Sign {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Sign::Negative => -x,
            Sign::Positive => x,
        }
    }

    fn is_default(&self) -> bool {
        *self == Sign::Negative
    }
}

/// One random (or fixed) coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingSpec {
    pub name: String,
    pub family: Family,
    #[serde(default, skip_serializing_if = "Sign::is_default")]
    pub sign: Sign,
    /// Pins the asymmetric-triangular offset `c` at zero.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pin_offset: bool,
}

impl MixingSpec {
    pub fn new(name: &str, family: Family) -> Self {
        Self {
            name: name.into(),
            family,
            sign: Sign::Negative,
            pin_offset: false,
        }
    }

    pub fn with_sign(mut self, sign: Sign) -> Self {
        self.sign = sign;
        self
    }

    pub fn arity(&self) -> usize {
        self.family.arity()
    }

    /// Which of the family's parameters are estimated.
    pub fn free_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.arity()];
        if self.family == Family::AsymTriangular && self.pin_offset {
            mask[2] = false;
        }
        mask
    }

    pub fn param_names(&self) -> Vec<String> {
        self.family
            .param_labels()
            .iter()
            .map(|l| {
                if l.is_empty() {
                    self.name.clone()
                } else {
                    format!("{}.{}", self.name, l)
                }
            })
            .collect()
    }

    /// Realizations per (person, draw), flattened person-major, reading the
    /// family's draw dimensions starting at `dim`.
    pub fn realize(
        &self,
        params: &[f64],
        block: &DrawBlock,
        dim: usize,
    ) -> Result<Vec<f64>, MixingError> {
        realize(self, params, block, dim)
    }
}

pub fn realize(
    spec: &MixingSpec,
    params: &[f64],
    block: &DrawBlock,
    dim: usize,
) -> Result<Vec<f64>, MixingError> {
    let family = spec.family;
    if params.len() != family.arity() {
        return Err(MixingError::ArityMismatch {
            family,
            expected: family.arity(),
            found: params.len(),
        });
    }
    if let Some(expected) = family.draw_kind() {
        if block.kind() != expected {
            return Err(MixingError::WrongDrawKind {
                family,
                expected,
                found: block.kind(),
            });
        }
    }
    let dims = family.draw_dims();
    if dims > 0 && dim + dims > block.n_dims() {
        return Err(MixingError::DimensionOutOfRange {
            dim: dim + dims - 1,
            n_dims: block.n_dims(),
        });
    }
    if family == Family::AsymTriangular {
        check_at(params[0], params[1], params[2])?;
    }
    let mut out = Vec::with_capacity(block.n_persons() * block.n_draws());
    let mut d = [0.0; 2];
    for p in 0..block.n_persons() {
        for r in 0..block.n_draws() {
            for (k, slot) in d.iter_mut().enumerate().take(dims) {
                *slot = block.get(p, r, dim + k);
            }
            out.push(realize_value(family, spec.sign, params, &d[..dims]));
        }
    }
    Ok(out)
}

/// Unchecked single realization. The asymmetric triangle takes its support
/// from `min(a, b)..max(a, b)`, collapses to a point when `a = b`, and clamps
/// a mode outside the support to the nearest endpoint.
#[inline]
pub fn realize_value(family: Family, sign: Sign, p: &[f64], d: &[f64]) -> f64 {
    match family {
        Family::Fixed => p[0],
        Family::Normal | Family::Uniform => p[0] + p[1] * d[0],
        Family::Triangular => p[0] + p[1] * (d[0] + d[1]),
        Family::LogNormal | Family::LogUniform => {
            sign.apply((p[0] + p[1] * d[0]).exp().max(f64::MIN_POSITIVE))
        }
        Family::AsymTriangular => {
            let (a, b) = if p[0] <= p[1] {
                (p[0], p[1])
            } else {
                (p[1], p[0])
            };
            if a == b {
                a
            } else {
                at_inverse_cdf(a, b, at_clamp_offset(a, b, p[2]), d[0]).unwrap_or(f64::NAN)
            }
        }
        Family::FmPoly(order) => {
            let mut acc = p[0];
            let mut pow = 1.0;
            for s in &p[1..=order as usize] {
                pow *= d[0];
                acc += s * pow;
            }
            acc
        }
    }
}

#[inline]
fn at_mode(a: f64, b: f64, c: f64) -> f64 {
    (a + b) / 2.0 + c
}

/// Offset `c` moved so the mode `(a + b)/2 + c` lies between `a` and `b`.
pub fn at_clamp_offset(a: f64, b: f64, c: f64) -> f64 {
    let half = (b - a).abs() / 2.0;
    c.clamp(-half, half)
}

fn check_at(a: f64, b: f64, c: f64) -> Result<f64, MixingError> {
    if a.is_nan() || b.is_nan() || a >= b {
        return Err(MixingError::DegenerateSupport { a, b });
    }
    let mode = at_mode(a, b, c);
    if !(a..=b).contains(&mode) {
        return Err(MixingError::ModeOutOfSupport { a, b, mode });
    }
    Ok(mode)
}

/// Single-draw inverse CDF of the asymmetric triangle on `[a, b]` with mode
/// `(a + b)/2 + c`.
pub fn at_inverse_cdf(a: f64, b: f64, c: f64, u: f64) -> Result<f64, MixingError> {
    let mode = check_at(a, b, c)?;
    let split = (mode - a) / (b - a);
    Ok(if u <= split {
        a + (mode - a) * (u / split).sqrt()
    } else {
        b - (b - mode) * ((1.0 - u) / (1.0 - split)).sqrt()
    })
}
