//! Utility specifications and simulated likelihoods.
//!
//! A [`ModelSpec`] is declarative: ASCs attached by alternative label,
//! generic attribute terms, an optional price term and one [`MixingSpec`] per
//! coefficient. [`Model::compile`] binds it to a dataset, lays out the
//! parameter vector and draw dimensions, and precomputes the design so that
//! likelihood evaluation is a tight loop over persons, draws and tasks.
//!
//! Stated-preference panels use
//! `P_n = (1/R) Σ_r Π_t P_{n t j*}(β_{n r})`; the RP pair model combines two
//! binary logits sharing a person-level error component `ρ_n = σ_ρ·d`.
//! Both floor `P_n` at [`PROB_FLOOR`] before taking logs.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ChoiceDataset, DataError, DataMode, Task};
use crate::draws::{mlhs, to_std_normal, DrawBlock, DrawError, DrawKind};
use crate::mixing::{realize_value, Family, MixingError, MixingSpec, Sign};

pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mixing(#[from] MixingError),
    #[error(transparent)]
    Draws(#[from] DrawError),
    #[error("coefficient `{0}` is used in the utility but has no mixing specification")]
    UnknownCoefficient(String),
    #[error("coefficient `{0}` is specified more than once")]
    DuplicateCoefficient(String),
    #[error("coefficient `{0}` does not enter any utility")]
    UnusedCoefficient(String),
    #[error("no value supplied for coefficient `{0}`")]
    MissingCoefficient(String),
    #[error("willingness-to-pay space needs a price term")]
    MissingPrice,
    #[error("price coefficient `{0}` must be lognormal or loguniform in willingness-to-pay space")]
    PriceNotSignConstrained(String),
    #[error("ASC label `{0}` does not occur in the data")]
    UnknownLabel(String),
    #[error("model expects {expected:?} data, dataset is {found:?}")]
    ModeMismatch { expected: DataMode, found: DataMode },
    #[error("rp block lists {covariates} covariates but {gammas} `{which}` coefficients")]
    CovariateCount {
        which: &'static str,
        covariates: usize,
        gammas: usize,
    },
    #[error("person `{person}` has no indicator `{name}`")]
    MissingIndicator { person: String, name: String },
    #[error("person `{person}` has no covariate `{name}`")]
    MissingCovariate { person: String, name: String },
    #[error("indicator `{name}` of person `{person}` is {value}, expected 0 or 1")]
    InvalidIndicator {
        person: String,
        name: String,
        value: f64,
    },
    #[error("draws cover {found} dimensions for {persons} persons, model needs {expected} dimensions for {needed_persons}")]
    DrawDimensionMismatch {
        expected: usize,
        found: usize,
        persons: usize,
        needed_persons: usize,
    },
    #[error("expected {expected} parameters, got {found}")]
    ParamLength { expected: usize, found: usize },
    #[error("non-finite utility or likelihood at the given parameters")]
    NonFinite,
}

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    #[default]
    Preference,
    Wtp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscTerm {
    pub label: String,
    pub coef: String,
}

/// `coef · attribute`, for every alternative or only those whose label is listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeTerm {
    pub attribute: String,
    pub coef: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceTerm {
    pub attribute: String,
    pub coef: String,
}

/// Two correlated binary logits for cigarette and e-cigarette use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpBlock {
    /// Covariate holding c_n.
    pub smoker: String,
    /// Covariate holding e_n.
    pub vaper: String,
    pub asc_cig: String,
    pub asc_ecig: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub gamma_cig: Vec<String>,
    #[serde(default)]
    pub gamma_ecig: Vec<String>,
    /// Name of the error-component scale parameter σ_ρ.
    pub error_scale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub space: Space,
    #[serde(default)]
    pub asc: Vec<AscTerm>,
    #[serde(default)]
    pub terms: Vec<AttributeTerm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<PriceTerm>,
    pub coefficients: Vec<MixingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rp: Option<RpBlock>,
}

impl ModelSpec {
    /// Coefficient names in the order they are first referenced.
    fn referenced(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        names.extend(self.asc.iter().map(|a| a.coef.as_str()));
        names.extend(self.terms.iter().map(|t| t.coef.as_str()));
        names.extend(self.price.iter().map(|p| p.coef.as_str()));
        if let Some(rp) = &self.rp {
            names.push(&rp.asc_cig);
            names.push(&rp.asc_ecig);
            names.extend(
                rp.gamma_cig
                    .iter()
                    .chain(&rp.gamma_ecig)
                    .map(String::as_str),
            );
        }
        let mut out: Vec<&str> = Vec::with_capacity(names.len());
        for n in names {
            if !out.contains(&n) {
                out.push(n);
            }
        }
        out
    }

    pub fn coefficient(&self, name: &str) -> Option<&MixingSpec> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn price_coef(&self) -> Option<&str> {
        self.price.as_ref().map(|p| p.coef.as_str())
    }

    pub fn validate(&self) -> ModelResult<()> {
        let mut seen = HashMap::new();
        for c in &self.coefficients {
            if seen.insert(c.name.as_str(), ()).is_some() {
                return Err(ModelError::DuplicateCoefficient(c.name.clone()));
            }
        }
        let used = self.referenced();
        for name in &used {
            if !seen.contains_key(name) {
                return Err(ModelError::UnknownCoefficient(name.to_string()));
            }
        }
        for c in &self.coefficients {
            if !used.contains(&c.name.as_str()) {
                return Err(ModelError::UnusedCoefficient(c.name.clone()));
            }
        }
        if self.space == Space::Wtp {
            let price = self.price.as_ref().ok_or(ModelError::MissingPrice)?;
            let spec = self
                .coefficient(&price.coef)
                .ok_or_else(|| ModelError::UnknownCoefficient(price.coef.clone()))?;
            if !matches!(spec.family, Family::LogNormal | Family::LogUniform) {
                return Err(ModelError::PriceNotSignConstrained(price.coef.clone()));
            }
        }
        if let Some(rp) = &self.rp {
            for (which, g) in [("gamma_cig", &rp.gamma_cig), ("gamma_ecig", &rp.gamma_ecig)] {
                if g.len() != rp.covariates.len() {
                    return Err(ModelError::CovariateCount {
                        which,
                        covariates: rp.covariates.len(),
                        gammas: g.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Every coefficient not declared `fixed` gets `family`. In WTP space the
    /// price coefficient keeps its sign-constrained family.
    pub fn with_family(&self, family: Family) -> ModelSpec {
        let mut out = self.clone();
        let keep = if self.space == Space::Wtp {
            self.price_coef().map(str::to_string)
        } else {
            None
        };
        for c in &mut out.coefficients {
            if c.family.is_mixed() && keep.as_deref() != Some(c.name.as_str()) {
                c.family = family;
            }
        }
        out
    }

    /// The fixed-coefficient counterpart (used for warm starts). The WTP price
    /// coefficient stays random.
    pub fn fixed_counterpart(&self) -> ModelSpec {
        self.with_family_all(Family::Fixed)
    }

    fn with_family_all(&self, family: Family) -> ModelSpec {
        let mut out = self.clone();
        let keep = if self.space == Space::Wtp {
            self.price_coef().map(str::to_string)
        } else {
            None
        };
        for c in &mut out.coefficients {
            if keep.as_deref() != Some(c.name.as_str()) {
                c.family = family;
            }
        }
        out
    }

    /// `(coefficient, family)` pairs in declaration order.
    pub fn families(&self) -> Vec<(String, Family)> {
        self.coefficients
            .iter()
            .map(|c| (c.name.clone(), c.family))
            .collect()
    }
}

/// Multinomial logit probabilities with max-subtraction.
pub fn mnl_prob(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Utilities of one task from named coefficient values, straight from the
/// spec. Preference space: `V = Σ β·x + ASC (+ β_p·price)`; WTP space:
/// `V = β_p·(price + Σ w·x + ASC)`.
pub fn build_utility(
    spec: &ModelSpec,
    attribute_names: &[String],
    task: &Task,
    coeffs: &BTreeMap<String, f64>,
) -> ModelResult<Vec<f64>> {
    let get = |name: &str| {
        coeffs
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingCoefficient(name.into()))
    };
    let attr = |name: &str| {
        attribute_names
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| ModelError::Data(DataError::UnknownAttribute(name.into())))
    };
    let mut out = Vec::with_capacity(task.alternatives.len());
    for alt in &task.alternatives {
        let mut v = 0.0;
        for t in &spec.terms {
            if t.labels.as_ref().is_some_and(|ls| !ls.contains(&alt.label)) {
                continue;
            }
            v += get(&t.coef)? * alt.values[attr(&t.attribute)?];
        }
        for a in &spec.asc {
            if a.label == alt.label {
                v += get(&a.coef)?;
            }
        }
        if let Some(p) = &spec.price {
            let beta_p = get(&p.coef)?;
            let price = alt.values[attr(&p.attribute)?];
            v = match spec.space {
                Space::Preference => v + beta_p * price,
                Space::Wtp => beta_p * (price + v),
            };
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct CoefSlot {
    family: Family,
    sign: Sign,
    offset: usize,
    kind: Option<DrawKind>,
    dim: usize,
}

#[derive(Debug, Clone)]
struct TaskDesign {
    start: usize,
    n_alts: usize,
    chosen: usize,
}

#[derive(Debug, Clone)]
struct PanelDesign {
    /// Task range per person.
    person_tasks: Vec<(usize, usize)>,
    tasks: Vec<TaskDesign>,
    /// `[alternative][coefficient]` multipliers.
    x: Vec<f64>,
    /// Price per alternative in WTP space.
    offset: Vec<f64>,
    label_of: Vec<usize>,
    scale_coef: Option<usize>,
    max_alts: usize,
}

#[derive(Debug, Clone)]
struct RpDesign {
    smoker: Vec<bool>,
    vaper: Vec<bool>,
    z: Vec<f64>,
    n_cov: usize,
    asc_cig: usize,
    asc_ecig: usize,
    gamma_cig: Vec<usize>,
    gamma_ecig: Vec<usize>,
    scale_param: usize,
    rho_dim: usize,
}

#[derive(Debug, Clone)]
enum Design {
    Panel(PanelDesign),
    Rp(RpDesign),
}

/// Uniform draws plus their standard-normal transform, one shared layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationDraws {
    pub uniform: DrawBlock,
    pub normal: DrawBlock,
}

impl SimulationDraws {
    pub fn mlhs(n_persons: usize, n_draws: usize, n_dims: usize, seed: u64) -> ModelResult<Self> {
        let uniform = mlhs(n_persons, n_draws, n_dims.max(1), seed)?;
        let normal = to_std_normal(&uniform)?;
        Ok(Self { uniform, normal })
    }

    pub fn n_draws(&self) -> usize {
        self.uniform.n_draws()
    }
}

/// Value of the simulated log-likelihood plus per-person probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLik {
    pub ll: f64,
    pub person_probs: Vec<f64>,
    /// Persons whose `P_n` hit [`PROB_FLOOR`].
    pub floored: usize,
}

/// A [`ModelSpec`] bound to a dataset.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    slots: Vec<CoefSlot>,
    full_names: Vec<String>,
    free: Vec<usize>,
    n_dims: usize,
    person_ids: Vec<String>,
    labels: Vec<String>,
    n_obs: usize,
    design: Design,
}

impl Model {
    pub fn compile(spec: &ModelSpec, data: &ChoiceDataset) -> ModelResult<Self> {
        spec.validate()?;
        let expected_mode = if spec.rp.is_some() {
            DataMode::RpPair
        } else {
            DataMode::StatedPanel
        };
        if data.mode != expected_mode {
            return Err(ModelError::ModeMismatch {
                expected: expected_mode,
                found: data.mode,
            });
        }

        let mut slots = Vec::with_capacity(spec.coefficients.len());
        let mut full_names = Vec::new();
        let mut free = Vec::new();
        let mut dim = 0;
        for c in &spec.coefficients {
            let offset = full_names.len();
            for (i, (name, is_free)) in c.param_names().into_iter().zip(c.free_mask()).enumerate() {
                if is_free {
                    free.push(offset + i);
                }
                full_names.push(name);
            }
            slots.push(CoefSlot {
                family: c.family,
                sign: c.sign,
                offset,
                kind: c.family.draw_kind(),
                dim,
            });
            dim += c.family.draw_dims();
        }
        let coef_index = |name: &str| {
            spec.coefficients
                .iter()
                .position(|c| c.name == name)
                .expect("validated")
        };

        let design = match &spec.rp {
            None => Design::Panel(Self::panel_design(spec, data, &coef_index)?),
            Some(rp) => {
                let scale_param = full_names.len();
                full_names.push(rp.error_scale.clone());
                free.push(scale_param);
                let rho_dim = dim;
                dim += 1;
                Design::Rp(Self::rp_design(
                    rp,
                    data,
                    &coef_index,
                    scale_param,
                    rho_dim,
                )?)
            }
        };
        let labels = match &design {
            Design::Panel(_) => data.alternative_labels.clone(),
            Design::Rp(_) => ["smoker", "non-smoker", "vaper", "non-vaper"]
                .map(String::from)
                .to_vec(),
        };

        Ok(Self {
            spec: spec.clone(),
            slots,
            full_names,
            free,
            n_dims: dim,
            person_ids: data.person_ids(),
            labels,
            n_obs: data.n_obs(),
            design,
        })
    }

    fn panel_design(
        spec: &ModelSpec,
        data: &ChoiceDataset,
        coef_index: &dyn Fn(&str) -> usize,
    ) -> ModelResult<PanelDesign> {
        let k = spec.coefficients.len();
        let terms = spec
            .terms
            .iter()
            .map(|t| {
                Ok((
                    data.attribute_index(&t.attribute)?,
                    coef_index(&t.coef),
                    t.labels.clone(),
                ))
            })
            .collect::<ModelResult<Vec<_>>>()?;
        for a in &spec.asc {
            if !data.alternative_labels.contains(&a.label) {
                return Err(ModelError::UnknownLabel(a.label.clone()));
            }
        }
        let price = match &spec.price {
            Some(p) => Some((data.attribute_index(&p.attribute)?, coef_index(&p.coef))),
            None => None,
        };
        let wtp = spec.space == Space::Wtp;

        let mut person_tasks = Vec::with_capacity(data.persons.len());
        let mut tasks = Vec::new();
        let mut x = Vec::new();
        let mut offset = Vec::new();
        let mut label_of = Vec::new();
        let mut max_alts = 0;
        for person in &data.persons {
            let first = tasks.len();
            for task in &person.tasks {
                let start = label_of.len();
                max_alts = max_alts.max(task.alternatives.len());
                for alt in &task.alternatives {
                    let mut row = vec![0.0; k];
                    for (attr, c, labels) in &terms {
                        if labels.as_ref().is_some_and(|ls| !ls.contains(&alt.label)) {
                            continue;
                        }
                        row[*c] += alt.values[*attr];
                    }
                    for a in &spec.asc {
                        if a.label == alt.label {
                            row[coef_index(&a.coef)] += 1.0;
                        }
                    }
                    let mut off = 0.0;
                    if let Some((attr, c)) = price {
                        if wtp {
                            off = alt.values[attr];
                        } else {
                            row[c] += alt.values[attr];
                        }
                    }
                    x.extend(row);
                    offset.push(off);
                    label_of.push(
                        data.alternative_labels
                            .iter()
                            .position(|l| *l == alt.label)
                            .expect("label"),
                    );
                }
                tasks.push(TaskDesign {
                    start,
                    n_alts: task.alternatives.len(),
                    chosen: task.chosen_index,
                });
            }
            person_tasks.push((first, tasks.len()));
        }
        Ok(PanelDesign {
            person_tasks,
            tasks,
            x,
            offset,
            label_of,
            scale_coef: if wtp { price.map(|(_, c)| c) } else { None },
            max_alts,
        })
    }

    fn rp_design(
        rp: &RpBlock,
        data: &ChoiceDataset,
        coef_index: &dyn Fn(&str) -> usize,
        scale_param: usize,
        rho_dim: usize,
    ) -> ModelResult<RpDesign> {
        let indicator = |p: &crate::data::PanelPerson, name: &str| -> ModelResult<bool> {
            let v = *p
                .covariates
                .get(name)
                .ok_or_else(|| ModelError::MissingIndicator {
                    person: p.id.clone(),
                    name: name.into(),
                })?;
            if v == 0.0 || v == 1.0 {
                Ok(v == 1.0)
            } else {
                Err(ModelError::InvalidIndicator {
                    person: p.id.clone(),
                    name: name.into(),
                    value: v,
                })
            }
        };
        let mut smoker = Vec::new();
        let mut vaper = Vec::new();
        let mut z = Vec::new();
        for p in &data.persons {
            smoker.push(indicator(p, &rp.smoker)?);
            vaper.push(indicator(p, &rp.vaper)?);
            for c in &rp.covariates {
                z.push(
                    *p.covariates
                        .get(c)
                        .ok_or_else(|| ModelError::MissingCovariate {
                            person: p.id.clone(),
                            name: c.clone(),
                        })?,
                );
            }
        }
        Ok(RpDesign {
            smoker,
            vaper,
            z,
            n_cov: rp.covariates.len(),
            asc_cig: coef_index(&rp.asc_cig),
            asc_ecig: coef_index(&rp.asc_ecig),
            gamma_cig: rp.gamma_cig.iter().map(|g| coef_index(g)).collect(),
            gamma_ecig: rp.gamma_ecig.iter().map(|g| coef_index(g)).collect(),
            scale_param,
            rho_dim,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Draw dimensions the model reads.
    pub fn n_dims(&self) -> usize {
        self.n_dims
    }

    pub fn n_persons(&self) -> usize {
        self.person_ids.len()
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn person_ids(&self) -> &[String] {
        &self.person_ids
    }

    /// Share labels: alternative labels, or smoker/vaper outcomes for RP.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_coefficients(&self) -> usize {
        self.slots.len()
    }

    /// Names of the estimated parameters.
    pub fn param_names(&self) -> Vec<String> {
        self.free
            .iter()
            .map(|&i| self.full_names[i].clone())
            .collect()
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn full_param_names(&self) -> &[String] {
        &self.full_names
    }

    /// Full parameter vector with pinned entries set to zero.
    pub fn expand(&self, theta: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.full_names.len()];
        for (&i, &v) in self.free.iter().zip(theta) {
            full[i] = v;
        }
        full
    }

    /// Parameters of coefficient `k` within a full vector.
    pub fn coefficient_params<'a>(&self, full: &'a [f64], k: usize) -> &'a [f64] {
        let s = &self.slots[k];
        &full[s.offset..s.offset + s.family.arity()]
    }

    fn check_theta(&self, theta: &[f64]) -> ModelResult<()> {
        if theta.len() != self.free.len() {
            return Err(ModelError::ParamLength {
                expected: self.free.len(),
                found: theta.len(),
            });
        }
        Ok(())
    }

    fn check_draws(&self, draws: &SimulationDraws) -> ModelResult<()> {
        let b = &draws.uniform;
        if b.n_dims() < self.n_dims || b.n_persons() != self.n_persons() {
            return Err(ModelError::DrawDimensionMismatch {
                expected: self.n_dims,
                found: b.n_dims(),
                persons: b.n_persons(),
                needed_persons: self.n_persons(),
            });
        }
        Ok(())
    }

    /// Fresh MLHS draws sized for this model.
    pub fn draws(&self, n_draws: usize, seed: u64) -> ModelResult<SimulationDraws> {
        SimulationDraws::mlhs(self.n_persons(), n_draws, self.n_dims, seed)
    }

    /// Default starting values for the free parameters.
    pub fn start_values(&self) -> Vec<f64> {
        let mut full = Vec::with_capacity(self.full_names.len());
        for s in &self.slots {
            full.extend(s.family.default_start());
        }
        if matches!(self.design, Design::Rp(_)) {
            full.push(0.1);
        }
        self.free.iter().map(|&i| full[i]).collect()
    }

    /// Starting values with each coefficient's mean set from `means`
    /// (e.g. a fixed-coefficient fit). Coefficients absent from `means`
    /// take their defaults; `exact` supplies full parameter slices to copy
    /// verbatim when the family matches.
    pub fn warm_start_values(
        &self,
        means: &BTreeMap<String, f64>,
        exact: &BTreeMap<String, (Family, Vec<f64>)>,
    ) -> Vec<f64> {
        let mut full = Vec::with_capacity(self.full_names.len());
        for (s, c) in self.slots.iter().zip(&self.spec.coefficients) {
            match (exact.get(&c.name), means.get(&c.name)) {
                (Some((f, p)), _) if *f == s.family => full.extend(p.iter().cloned()),
                (_, Some(&m)) => full.extend(s.family.warm_start(m, s.sign)),
                _ => full.extend(s.family.default_start()),
            }
        }
        if let Some(rp) = &self.spec.rp {
            full.push(means.get(&rp.error_scale).copied().unwrap_or(0.1));
        }
        self.free.iter().map(|&i| full[i]).collect()
    }

    /// Realizes every coefficient for one (person, draw) row of uniform and
    /// normal draws.
    #[inline]
    pub fn realize_row(&self, full: &[f64], uniform: &[f64], normal: &[f64], beta: &mut [f64]) {
        for (b, s) in beta.iter_mut().zip(&self.slots) {
            let p = &full[s.offset..s.offset + s.family.arity()];
            let d: &[f64] = match s.kind {
                None => &[],
                Some(DrawKind::Uniform01) => &uniform[s.dim..s.dim + s.family.draw_dims()],
                Some(DrawKind::StdNormal) => &normal[s.dim..s.dim + s.family.draw_dims()],
            };
            *b = realize_value(s.family, s.sign, p, d);
        }
    }

    /// Log of each person's simulated probability, unfloored.
    fn person_log_probs(&self, draws: &SimulationDraws, full: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let r_count = draws.n_draws();
        let d_count = draws.uniform.n_dims();
        let mut beta = vec![0.0; self.slots.len()];
        let mut logs = vec![0.0; r_count];
        match &self.design {
            Design::Panel(pd) if self.n_dims > 0 => self.panel_log_probs(pd, draws, full, out),
            Design::Panel(pd) => {
                // every draw gives the same β: one suffices, and ln of the
                // mean of R equal terms is exactly the single term
                let k = self.slots.len();
                let mut v = vec![0.0; pd.max_alts];
                for (p, &(t0, t1)) in pd.person_tasks.iter().enumerate() {
                    let ud = draws.uniform.person(p);
                    let nd = draws.normal.person(p);
                    self.realize_row(full, &ud[..d_count], &nd[..d_count], &mut beta);
                    let scale = pd.scale_coef.map_or(1.0, |c| beta[c]);
                    let mut l = 0.0;
                    for task in &pd.tasks[t0..t1] {
                        for (j, vj) in v.iter_mut().enumerate().take(task.n_alts) {
                            let a = task.start + j;
                            let s = linear(&pd.x[a * k..(a + 1) * k], &beta);
                            *vj = if pd.scale_coef.is_some() {
                                scale * (pd.offset[a] + s)
                            } else {
                                s
                            };
                        }
                        l += log_choice_prob(&v[..task.n_alts], task.chosen);
                    }
                    out.push(l);
                }
            }
            Design::Rp(rd) => {
                let sigma = full[rd.scale_param];
                for p in 0..self.n_persons() {
                    let ud = draws.uniform.person(p);
                    let nd = draws.normal.person(p);
                    let z = &rd.z[p * rd.n_cov..(p + 1) * rd.n_cov];
                    for (r, slot) in logs.iter_mut().enumerate() {
                        let row = r * d_count..(r + 1) * d_count;
                        self.realize_row(full, &ud[row.clone()], &nd[row.clone()], &mut beta);
                        let rho = sigma * nd[row.start + rd.rho_dim];
                        let mut v_cig = beta[rd.asc_cig] + rho;
                        let mut v_ecig = beta[rd.asc_ecig] + rho;
                        for (i, zi) in z.iter().enumerate() {
                            v_cig += beta[rd.gamma_cig[i]] * zi;
                            v_ecig += beta[rd.gamma_ecig[i]] * zi;
                        }
                        *slot = log_binary(v_cig, rd.smoker[p]) + log_binary(v_ecig, rd.vaper[p]);
                    }
                    out.push(log_mean_exp(&logs));
                }
            }
        }
    }

    /// Mixed panel kernel. Works draw-innermost so the loops vectorize, and
    /// multiplies task probabilities per draw (renormalizing against
    /// underflow) instead of summing per-task logs.
    fn panel_log_probs(
        &self,
        pd: &PanelDesign,
        draws: &SimulationDraws,
        full: &[f64],
        out: &mut Vec<f64>,
    ) {
        const TINY: f64 = 1e-200;
        let ln_tiny = TINY.ln();
        let k = self.slots.len();
        let r_count = draws.n_draws();
        let d_count = draws.uniform.n_dims();
        let mut row = vec![0.0; k];
        let mut beta = vec![0.0; k * r_count];
        let mut v = vec![0.0; pd.max_alts * r_count];
        let mut m = vec![0.0; r_count];
        let mut den = vec![0.0; r_count];
        let mut prod = vec![0.0; r_count];
        let mut renorm = vec![0.0; r_count];
        for (p, &(t0, t1)) in pd.person_tasks.iter().enumerate() {
            let ud = draws.uniform.person(p);
            let nd = draws.normal.person(p);
            let mut invalid = false;
            for r in 0..r_count {
                let span = r * d_count..(r + 1) * d_count;
                self.realize_row(full, &ud[span.clone()], &nd[span], &mut row);
                for (kk, b) in row.iter().enumerate() {
                    invalid |= !b.is_finite();
                    beta[kk * r_count + r] = *b;
                }
            }
            if invalid {
                out.push(f64::NAN);
                continue;
            }
            prod.fill(1.0);
            renorm.fill(0.0);
            for task in &pd.tasks[t0..t1] {
                let n = task.n_alts;
                for j in 0..n {
                    let a = task.start + j;
                    let vj = &mut v[j * r_count..(j + 1) * r_count];
                    vj.fill(pd.offset.get(a).copied().unwrap_or(0.0));
                    for (kk, &xv) in pd.x[a * k..(a + 1) * k].iter().enumerate() {
                        if xv != 0.0 {
                            let b = &beta[kk * r_count..(kk + 1) * r_count];
                            for (vr, br) in vj.iter_mut().zip(b) {
                                *vr += xv * br;
                            }
                        }
                    }
                    if let Some(c) = pd.scale_coef {
                        let b = &beta[c * r_count..(c + 1) * r_count];
                        for (vr, br) in vj.iter_mut().zip(b) {
                            *vr *= br;
                        }
                    }
                }
                m.copy_from_slice(&v[..r_count]);
                for j in 1..n {
                    for (mr, vr) in m.iter_mut().zip(&v[j * r_count..(j + 1) * r_count]) {
                        *mr = if *vr > *mr { *vr } else { *mr };
                    }
                }
                den.fill(0.0);
                for j in 0..n {
                    for ((dr, vr), mr) in den
                        .iter_mut()
                        .zip(&v[j * r_count..(j + 1) * r_count])
                        .zip(&m)
                    {
                        *dr += fast_exp(vr - mr);
                    }
                }
                let vc = &v[task.chosen * r_count..(task.chosen + 1) * r_count];
                for r in 0..r_count {
                    prod[r] *= fast_exp(vc[r] - m[r]) / den[r];
                }
                for r in 0..r_count {
                    if prod[r] < TINY {
                        prod[r] /= TINY;
                        renorm[r] += 1.0;
                    }
                }
            }
            for r in 0..r_count {
                den[r] = prod[r].ln() + renorm[r] * ln_tiny;
            }
            out.push(log_mean_exp(&den));
        }
    }

    /// Simulated log-likelihood at the free parameters `theta`.
    pub fn loglik(&self, draws: &SimulationDraws, theta: &[f64]) -> ModelResult<LogLik> {
        self.check_theta(theta)?;
        self.check_draws(draws)?;
        let full = self.expand(theta);
        let mut logs = Vec::with_capacity(self.n_persons());
        self.person_log_probs(draws, &full, &mut logs);
        let floor = PROB_FLOOR.ln();
        let mut ll = 0.0;
        let mut floored = 0;
        let mut person_probs = Vec::with_capacity(logs.len());
        for lp in logs {
            if lp.is_nan() {
                return Err(ModelError::NonFinite);
            }
            let lp = if lp < floor {
                floored += 1;
                floor
            } else {
                lp
            };
            ll += lp;
            person_probs.push(lp.exp().max(PROB_FLOOR));
        }
        Ok(LogLik {
            ll,
            person_probs,
            floored,
        })
    }

    /// Log-likelihood value only, for optimizers. Returns NaN when the
    /// parameters are infeasible.
    pub fn loglik_value(&self, draws: &SimulationDraws, theta: &[f64]) -> f64 {
        let full = self.expand(theta);
        let mut logs = Vec::with_capacity(self.n_persons());
        self.person_log_probs(draws, &full, &mut logs);
        let floor = PROB_FLOOR.ln();
        logs.into_iter()
            .map(|lp| if lp < floor { floor } else { lp })
            .sum()
    }

    /// Sample-enumeration shares per label: simulated probabilities averaged
    /// over persons, tasks and draws. RP models report smoker / non-smoker /
    /// vaper / non-vaper.
    pub fn shares(
        &self,
        draws: &SimulationDraws,
        theta: &[f64],
    ) -> ModelResult<Vec<(String, f64)>> {
        self.check_theta(theta)?;
        self.check_draws(draws)?;
        let full = self.expand(theta);
        let r_count = draws.n_draws();
        let d_count = draws.uniform.n_dims();
        let mut beta = vec![0.0; self.slots.len()];
        let mut acc = vec![0.0; self.labels.len()];
        let mut count = 0usize;
        match &self.design {
            Design::Panel(pd) => {
                let k = self.slots.len();
                let mut v = vec![0.0; pd.max_alts];
                for (p, &(t0, t1)) in pd.person_tasks.iter().enumerate() {
                    let ud = draws.uniform.person(p);
                    let nd = draws.normal.person(p);
                    for r in 0..r_count {
                        let row = r * d_count..(r + 1) * d_count;
                        self.realize_row(&full, &ud[row.clone()], &nd[row], &mut beta);
                        let scale = pd.scale_coef.map_or(1.0, |c| beta[c]);
                        for task in &pd.tasks[t0..t1] {
                            for (j, vj) in v.iter_mut().enumerate().take(task.n_alts) {
                                let a = task.start + j;
                                let s: f64 = pd.x[a * k..(a + 1) * k]
                                    .iter()
                                    .zip(&beta)
                                    .map(|(x, b)| x * b)
                                    .sum();
                                *vj = if pd.scale_coef.is_some() {
                                    scale * (pd.offset[a] + s)
                                } else {
                                    s
                                };
                            }
                            let probs = mnl_prob(&v[..task.n_alts]);
                            for (j, pj) in probs.iter().enumerate() {
                                acc[pd.label_of[task.start + j]] += pj;
                            }
                            count += 1;
                        }
                    }
                }
            }
            Design::Rp(rd) => {
                let sigma = full[rd.scale_param];
                for p in 0..self.n_persons() {
                    let ud = draws.uniform.person(p);
                    let nd = draws.normal.person(p);
                    let z = &rd.z[p * rd.n_cov..(p + 1) * rd.n_cov];
                    for r in 0..r_count {
                        let row = r * d_count..(r + 1) * d_count;
                        self.realize_row(&full, &ud[row.clone()], &nd[row.clone()], &mut beta);
                        let rho = sigma * nd[row.start + rd.rho_dim];
                        let mut v_cig = beta[rd.asc_cig] + rho;
                        let mut v_ecig = beta[rd.asc_ecig] + rho;
                        for (i, zi) in z.iter().enumerate() {
                            v_cig += beta[rd.gamma_cig[i]] * zi;
                            v_ecig += beta[rd.gamma_ecig[i]] * zi;
                        }
                        let pc = logistic(v_cig);
                        let pe = logistic(v_ecig);
                        acc[0] += pc;
                        acc[1] += 1.0 - pc;
                        acc[2] += pe;
                        acc[3] += 1.0 - pe;
                        count += 1;
                    }
                }
            }
        }
        if acc.iter().any(|a| !a.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(self
            .labels
            .iter()
            .cloned()
            .zip(acc.into_iter().map(|a| a / count as f64))
            .collect())
    }
}

#[inline]
fn linear(x: &[f64], beta: &[f64]) -> f64 {
    let mut s = 0.0;
    for (xv, bv) in x.iter().zip(beta) {
        s += xv * bv;
    }
    s
}

/// `ln P(chosen)` under MNL: `(V_c − m) − ln Σ_j exp(V_j − m)`, `m = max V`.
pub fn log_choice_prob(v: &[f64], chosen: usize) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for &u in v {
        denom += (u - m).exp();
    }
    (v[chosen] - m) - denom.ln()
}

/// Branch-free `exp` for the likelihood kernel: Cody-Waite reduction by
/// ln 2 and a degree-13 Taylor polynomial, relative error ~1e-16. Inputs
/// are clamped to [−708, 709], NaN included; callers screen NaN first.
#[inline(always)]
#[allow(clippy::excessive_precision, clippy::manual_clamp)]
pub fn fast_exp(x: f64) -> f64 {
    const MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    let x = x.max(-708.0).min(709.0);
    let kb = (x * std::f64::consts::LOG2_E + MAGIC).to_bits();
    let k = f64::from_bits(kb) - MAGIC;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    p * f64::from_bits(kb.wrapping_add(1023) << 52)
}

#[inline]
fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// ln P(y) for a binary logit with utility `v`:
/// `y ln σ(v) + (1−y) ln(1−σ(v))`.
#[inline]
fn log_binary(v: f64, y: bool) -> f64 {
    let t = if y { -v } else { v };
    // -softplus(t)
    if t > 0.0 {
        -(t + (-t).exp().ln_1p())
    } else {
        -t.exp().ln_1p()
    }
}

/// `ln((1/R) Σ exp(l_r))`, exact when all `l_r` are equal.
fn log_mean_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = logs.iter().map(|l| (l - m).exp()).sum();
    m + (s / logs.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Alternative, PanelPerson};

    fn alt(label: &str, values: Vec<f64>) -> Alternative {
        Alternative {
            label: label.into(),
            values,
            levels: vec![],
        }
    }

    fn task(alts: Vec<Alternative>, chosen: usize) -> Task {
        Task {
            id: "1".into(),
            alternatives: alts,
            chosen_index: chosen,
        }
    }

    #[test]
    fn softmax_examples() {
        let p = mnl_prob(&[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = mnl_prob(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = mnl_prob(&[1000.0, 0.0]);
        assert!(p[0].is_finite() && (p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
    }

    fn single_attr_spec(space: Space) -> ModelSpec {
        ModelSpec {
            space,
            asc: vec![],
            terms: vec![AttributeTerm {
                attribute: "menthol".into(),
                coef: "w_menthol".into(),
                labels: None,
            }],
            price: Some(PriceTerm {
                attribute: "price".into(),
                coef: "b_price".into(),
            }),
            coefficients: vec![
                MixingSpec::new("w_menthol", Family::Normal),
                MixingSpec::new("b_price", Family::LogNormal),
            ],
            rp: None,
        }
    }

    #[test]
    fn utility_examples() {
        let names = vec!["menthol".to_string(), "price".to_string()];
        let t = task(
            vec![alt("a", vec![1.0, 10.0]), alt("b", vec![0.0, 10.0])],
            0,
        );
        let coeffs: BTreeMap<String, f64> =
            [("w_menthol".into(), -5.90), ("b_price".into(), -0.5)].into();
        let v = build_utility(&single_attr_spec(Space::Wtp), &names, &t, &coeffs).unwrap();
        assert!(
            (v[0] + 2.05).abs() < 1e-12 && (v[1] + 5.0).abs() < 1e-12,
            "{v:?}"
        );

        let zero: BTreeMap<String, f64> =
            [("w_menthol".into(), 0.0), ("b_price".into(), 0.0)].into();
        let v = build_utility(&single_attr_spec(Space::Preference), &names, &t, &zero).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);

        let mut spec = single_attr_spec(Space::Preference);
        spec.price = None;
        spec.coefficients.pop();
        let only: BTreeMap<String, f64> = [("w_menthol".into(), 2.0)].into();
        assert_eq!(
            build_utility(&spec, &names, &t, &only).unwrap(),
            vec![2.0, 0.0]
        );
        assert!(matches!(
            build_utility(&spec, &names, &t, &BTreeMap::new()),
            Err(ModelError::MissingCoefficient(_))
        ));
    }

    #[test]
    fn spec_validation() {
        let mut s = single_attr_spec(Space::Wtp);
        s.coefficients[1].family = Family::Normal;
        assert!(matches!(
            s.validate(),
            Err(ModelError::PriceNotSignConstrained(_))
        ));
        let mut s = single_attr_spec(Space::Wtp);
        s.price = None;
        assert!(matches!(
            s.validate(),
            Err(ModelError::UnusedCoefficient(_))
        ));
        let mut s = single_attr_spec(Space::Preference);
        s.coefficients
            .push(MixingSpec::new("b_price", Family::Fixed));
        assert!(matches!(
            s.validate(),
            Err(ModelError::DuplicateCoefficient(_))
        ));
        let mut s = single_attr_spec(Space::Preference);
        s.coefficients.remove(0);
        assert!(matches!(
            s.validate(),
            Err(ModelError::UnknownCoefficient(_))
        ));
        let s = single_attr_spec(Space::Wtp).with_family(Family::Uniform);
        assert_eq!(s.coefficients[0].family, Family::Uniform);
        assert_eq!(s.coefficients[1].family, Family::LogNormal);
    }

    fn tiny_dataset() -> ChoiceDataset {
        let person = |id: &str, chosen: usize| PanelPerson {
            id: id.into(),
            tasks: vec![task(vec![alt("a", vec![1.0]), alt("b", vec![0.0])], chosen)],
            covariates: BTreeMap::new(),
        };
        ChoiceDataset {
            persons: vec![person("1", 0), person("2", 1)],
            attribute_names: vec!["x".into()],
            categorical_names: vec![],
            covariate_names: vec![],
            alternative_labels: vec!["a".into(), "b".into()],
            mode: DataMode::StatedPanel,
        }
    }

    #[test]
    fn draw_dimension_checked() {
        let spec = ModelSpec {
            space: Space::Preference,
            asc: vec![],
            terms: vec![AttributeTerm {
                attribute: "x".into(),
                coef: "bx".into(),
                labels: None,
            }],
            price: None,
            coefficients: vec![MixingSpec::new("bx", Family::Triangular)],
            rp: None,
        };
        let m = Model::compile(&spec, &tiny_dataset()).unwrap();
        assert_eq!(m.n_dims(), 2);
        let short = SimulationDraws::mlhs(2, 5, 1, 0).unwrap();
        assert!(matches!(
            m.loglik(&short, &[0.0, 0.1]),
            Err(ModelError::DrawDimensionMismatch { .. })
        ));
        let wrong_persons = SimulationDraws::mlhs(3, 5, 2, 0).unwrap();
        assert!(matches!(
            m.loglik(&wrong_persons, &[0.0, 0.1]),
            Err(ModelError::DrawDimensionMismatch { .. })
        ));
        assert!(matches!(
            m.loglik(&m.draws(5, 0).unwrap(), &[0.0]),
            Err(ModelError::ParamLength { .. })
        ));
    }

    #[test]
    fn fast_exp_accuracy() {
        let mut worst = 0.0f64;
        let mut x = -700.0;
        while x < 700.0 {
            let rel = (fast_exp(x) - x.exp()).abs() / x.exp();
            worst = worst.max(rel);
            x += 0.0137;
        }
        assert!(worst < 5e-16, "{worst}");
        assert_eq!(fast_exp(0.0), 1.0);
        assert!(fast_exp(-1e6) > 0.0 && fast_exp(-1e6) < 1e-300);
        assert!(fast_exp(1e6).is_finite());
    }

    #[test]
    fn log_mean_exp_exact_for_equal_terms() {
        let l = -3.217_845_1;
        assert_eq!(log_mean_exp(&[l; 7]), l);
        assert!((log_mean_exp(&[0.0, 2f64.ln()]) - 1.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn binary_log_probs() {
        assert!((log_binary(0.0, true) - 0.5f64.ln()).abs() < 1e-15);
        assert!((log_binary(2.0, true) - logistic(2.0).ln()).abs() < 1e-14);
        assert!((log_binary(2.0, false) - (1.0 - logistic(2.0)).ln()).abs() < 1e-14);
        assert!(log_binary(-800.0, true).is_finite());
    }
}
