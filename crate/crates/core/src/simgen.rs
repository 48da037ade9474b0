//! Simulated drug-choice panels with known taste distributions.
//!
//! Each person draws one β vector from the true distributions and keeps it
//! for all tasks. Every task shows two branded and two unbranded products
//! whose country, characteristic, side-effect risk and price are drawn
//! independently from their level sets; the choice is made by inverse CDF
//! on the MNL probabilities.

use std::io::Write;

use rand::distributions::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    Alternative, ChoiceDataset, CodingPlan, ColumnSchema, DataMode, PanelPerson, Task,
};
use crate::draws::inverse_normal_cdf;
use crate::mixing::{at_inverse_cdf, Family, MixingSpec, Sign};
use crate::models::{mnl_prob, AttributeTerm, ModelSpec, PriceTerm, Space};
use crate::postest::{density_grid, DensityGrid, PostestError, DEFAULT_BINS};

pub const BRANDED: &str = "branded";
pub const UNBRANDED: &str = "unbranded";
pub const COUNTRY: &str = "country";
pub const CHARACTERISTIC: &str = "characteristic";
pub const SIDE_EFFECTS: &str = "side_effects";
pub const PRICE: &str = "price";

/// Utility coefficients, in design order.
pub const COEFFICIENTS: [&str; 6] = [
    "branded",
    "country_foreign",
    "characteristic_fast_acting",
    "characteristic_double_strength",
    "side_effects",
    "price",
];

/// Samples drawn to build truth density grids.
pub const TRUTH_DENSITY_SAMPLES: usize = 100_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid levels for `{0}`")]
    InvalidLevels(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("coefficient `{0}` needs exactly one true distribution")]
    Truth(String),
    #[error(transparent)]
    Postest(#[from] PostestError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// A population taste distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TrueDistribution {
    Fixed {
        value: f64,
    },
    Normal {
        mean: f64,
        sd: f64,
    },
    Uniform {
        lower: f64,
        upper: f64,
    },
    /// `sign · exp(N(mu, sigma²))`.
    LogNormal {
        mu: f64,
        sigma: f64,
        sign: Sign,
    },
    AsymTriangular {
        lower: f64,
        upper: f64,
        mode: f64,
    },
    NormalMixture {
        weights: Vec<f64>,
        means: Vec<f64>,
        sds: Vec<f64>,
    },
}

impl TrueDistribution {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let z = |rng: &mut R| inverse_normal_cdf(Open01.sample(rng));
        match self {
            TrueDistribution::Fixed { value } => *value,
            TrueDistribution::Normal { mean, sd } => mean + sd * z(rng),
            TrueDistribution::Uniform { lower, upper } => {
                let u: f64 = Open01.sample(rng);
                lower + (upper - lower) * u
            }
            TrueDistribution::LogNormal { mu, sigma, sign } => {
                sign.apply((mu + sigma * z(rng)).exp())
            }
            TrueDistribution::AsymTriangular { lower, upper, mode } => {
                let c = mode - (lower + upper) / 2.0;
                at_inverse_cdf(*lower, *upper, c, Open01.sample(rng)).unwrap_or(f64::NAN)
            }
            TrueDistribution::NormalMixture {
                weights,
                means,
                sds,
            } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut k = weights.len() - 1;
                for (j, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = j;
                        break;
                    }
                }
                means[k] + sds[k] * z(rng)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            TrueDistribution::Fixed { value } => *value,
            TrueDistribution::Normal { mean, .. } => *mean,
            TrueDistribution::Uniform { lower, upper } => (lower + upper) / 2.0,
            TrueDistribution::LogNormal { mu, sigma, sign } => {
                sign.apply((mu + sigma * sigma / 2.0).exp())
            }
            TrueDistribution::AsymTriangular { lower, upper, mode } => (lower + upper + mode) / 3.0,
            TrueDistribution::NormalMixture { weights, means, .. } => {
                weights.iter().zip(means).map(|(w, m)| w * m).sum()
            }
        }
    }

    fn validate(&self, name: &str) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(format!("{name}: {msg}")));
        match self {
            TrueDistribution::Normal { sd, .. } if *sd < 0.0 => bad("negative sd"),
            TrueDistribution::Uniform { lower, upper }
                if lower.is_nan() || upper.is_nan() || lower > upper =>
            {
                bad("lower above upper")
            }
            TrueDistribution::AsymTriangular { lower, upper, mode }
                if !(lower < upper && (lower..=upper).contains(&mode)) =>
            {
                bad("mode outside (lower, upper)")
            }
            TrueDistribution::NormalMixture {
                weights,
                means,
                sds,
            } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != sds.len()
                {
                    return bad("mixture component lists differ in length");
                }
                if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
                    || weights.iter().any(|w| *w < 0.0)
                {
                    return bad("mixture weights must be non-negative and sum to 1");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueCoefficient {
    pub name: String,
    pub distribution: TrueDistribution,
}

/// Implementation-defined generating distributions: bimodal branded,
/// normal country, uniform and normal characteristic effects, asymmetric
/// triangular side effects and negative lognormal price.
pub fn default_truth() -> Vec<TrueCoefficient> {
    let t = |name: &str, distribution| TrueCoefficient {
        name: name.into(),
        distribution,
    };
    vec![
        t(
            "branded",
            TrueDistribution::NormalMixture {
                weights: vec![0.5, 0.5],
                means: vec![-1.0, 1.0],
                sds: vec![0.5, 0.5],
            },
        ),
        t(
            "country_foreign",
            TrueDistribution::Normal {
                mean: -0.6,
                sd: 0.4,
            },
        ),
        t(
            "characteristic_fast_acting",
            TrueDistribution::Uniform {
                lower: 0.2,
                upper: 1.2,
            },
        ),
        t(
            "characteristic_double_strength",
            TrueDistribution::Normal { mean: 0.8, sd: 0.3 },
        ),
        t(
            "side_effects",
            TrueDistribution::AsymTriangular {
                lower: -1.2,
                upper: 0.0,
                mode: -0.8,
            },
        ),
        t(
            "price",
            TrueDistribution::LogNormal {
                mu: 0.2f64.ln(),
                sigma: 0.5,
                sign: Sign::Negative,
            },
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_persons: usize,
    pub n_tasks: usize,
    /// One entry per alternative position.
    pub alternatives: Vec<String>,
    pub country_levels: Vec<String>,
    pub characteristic_levels: Vec<String>,
    pub side_effect_levels: Vec<f64>,
    pub price_levels: Vec<f64>,
    pub truth: Vec<TrueCoefficient>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_persons: 1000,
            n_tasks: 10,
            alternatives: [BRANDED, BRANDED, UNBRANDED, UNBRANDED]
                .map(String::from)
                .to_vec(),
            country_levels: ["domestic", "foreign"].map(String::from).to_vec(),
            characteristic_levels: ["standard", "fast acting", "double strength"]
                .map(String::from)
                .to_vec(),
            side_effect_levels: vec![1.0, 2.0, 3.0, 4.0],
            price_levels: vec![2.0, 4.0, 6.0, 8.0, 10.0],
            truth: default_truth(),
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn with_size(mut self, n_persons: usize, n_tasks: usize) -> Self {
        self.n_persons = n_persons;
        self.n_tasks = n_tasks;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// All coefficients fixed at the given values.
    pub fn with_fixed_truth(mut self, values: [f64; 6]) -> Self {
        self.truth = COEFFICIENTS
            .iter()
            .zip(values)
            .map(|(n, value)| TrueCoefficient {
                name: n.to_string(),
                distribution: TrueDistribution::Fixed { value },
            })
            .collect();
        self
    }

    /// Truth distributions in [`COEFFICIENTS`] order.
    fn ordered_truth(&self) -> Result<Vec<&TrueDistribution>, SimError> {
        COEFFICIENTS
            .iter()
            .map(|name| {
                let mut found = self.truth.iter().filter(|t| t.name == *name);
                match (found.next(), found.next()) {
                    (Some(t), None) => {
                        t.distribution.validate(name)?;
                        Ok(&t.distribution)
                    }
                    _ => Err(SimError::Truth(name.to_string())),
                }
            })
            .collect()
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n_persons == 0 || self.n_tasks == 0 {
            return Err(SimError::InvalidConfig(
                "n_persons and n_tasks must be at least 1".into(),
            ));
        }
        if self.alternatives.len() < 2 {
            return Err(SimError::InvalidLevels("alternatives".into()));
        }
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(SimError::InvalidLevels(what.into()))
            }
        };
        need(
            self.country_levels.len() >= 2 && self.country_levels[1] == "foreign",
            COUNTRY,
        )?;
        need(
            self.characteristic_levels.len() >= 3
                && self.characteristic_levels[1] == "fast acting"
                && self.characteristic_levels[2] == "double strength",
            CHARACTERISTIC,
        )?;
        need(
            !self.side_effect_levels.is_empty()
                && self.side_effect_levels.iter().all(|v| v.is_finite()),
            SIDE_EFFECTS,
        )?;
        need(
            !self.price_levels.is_empty() && self.price_levels.iter().all(|v| v.is_finite()),
            PRICE,
        )?;
        if let Some(t) = self
            .truth
            .iter()
            .find(|t| !COEFFICIENTS.contains(&t.name.as_str()))
        {
            return Err(SimError::Truth(t.name.clone()));
        }
        Ok(())
    }
}

/// Per-person true coefficients, `values[person][coef]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTable {
    pub person_ids: Vec<String>,
    pub coefficients: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl TruthTable {
    pub fn column(&self, coef: &str) -> Option<Vec<f64>> {
        let k = self.coefficients.iter().position(|c| c == coef)?;
        Some(self.values.iter().map(|row| row[k]).collect())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SimError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["person".to_string()];
        header.extend(self.coefficients.iter().cloned());
        wtr.write_record(&header)?;
        for (id, row) in self.person_ids.iter().zip(&self.values) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// Uncoded: `country` and `characteristic` hold level names.
    pub dataset: ChoiceDataset,
    pub truth: TruthTable,
    /// Probability of each chosen alternative under the true β, per task.
    pub true_probabilities: Vec<Vec<f64>>,
}

fn pick<'a, T, R: Rng>(levels: &'a [T], rng: &mut R) -> &'a T {
    &levels[rng.gen_range(0..levels.len())]
}

/// Simulate a panel from `config`.
pub fn generate(config: &SimConfig) -> Result<SimOutput, SimError> {
    config.validate()?;
    let truth = config.ordered_truth()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let width = (config.n_persons.max(1) as f64).log10() as usize + 1;
    let mut persons = Vec::with_capacity(config.n_persons);
    let mut values = Vec::with_capacity(config.n_persons);
    let mut true_probabilities = Vec::with_capacity(config.n_persons * config.n_tasks);
    let mut ids = Vec::with_capacity(config.n_persons);
    for n in 0..config.n_persons {
        let beta: Vec<f64> = truth.iter().map(|d| d.sample(&mut rng)).collect();
        let id = format!("{:0width$}", n + 1);
        let mut tasks = Vec::with_capacity(config.n_tasks);
        for t in 0..config.n_tasks {
            let mut alternatives = Vec::with_capacity(config.alternatives.len());
            let mut v = Vec::with_capacity(config.alternatives.len());
            for label in &config.alternatives {
                let country = pick(&config.country_levels, &mut rng).clone();
                let characteristic = pick(&config.characteristic_levels, &mut rng).clone();
                let side = *pick(&config.side_effect_levels, &mut rng);
                let price = *pick(&config.price_levels, &mut rng);
                let branded = if label == BRANDED { 1.0 } else { 0.0 };
                let x = [
                    branded,
                    (country == config.country_levels[1]) as u8 as f64,
                    (characteristic == config.characteristic_levels[1]) as u8 as f64,
                    (characteristic == config.characteristic_levels[2]) as u8 as f64,
                    side,
                    price,
                ];
                v.push(x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>());
                alternatives.push(Alternative {
                    label: label.clone(),
                    values: vec![branded, side, price],
                    levels: vec![country, characteristic],
                });
            }
            let probs = mnl_prob(&v);
            let u: f64 = rng.gen();
            let mut chosen = probs.len() - 1;
            let mut acc = 0.0;
            for (j, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = j;
                    break;
                }
            }
            true_probabilities.push(probs);
            tasks.push(Task {
                id: (t + 1).to_string(),
                alternatives,
                chosen_index: chosen,
            });
        }
        persons.push(PanelPerson {
            id: id.clone(),
            tasks,
            covariates: Default::default(),
        });
        values.push(beta);
        ids.push(id);
    }
    let mut labels: Vec<String> = Vec::new();
    for l in &config.alternatives {
        if !labels.contains(l) {
            labels.push(l.clone());
        }
    }
    let dataset = ChoiceDataset {
        persons,
        attribute_names: [BRANDED, SIDE_EFFECTS, PRICE].map(String::from).to_vec(),
        categorical_names: [COUNTRY, CHARACTERISTIC].map(String::from).to_vec(),
        covariate_names: vec![],
        alternative_labels: labels,
        mode: DataMode::StatedPanel,
    };
    Ok(SimOutput {
        dataset,
        truth: TruthTable {
            person_ids: ids,
            coefficients: COEFFICIENTS.map(String::from).to_vec(),
            values,
        },
        true_probabilities,
    })
}

/// Column layout of a simulated data file.
pub fn sim_schema() -> ColumnSchema {
    ColumnSchema {
        attributes: [BRANDED, SIDE_EFFECTS, PRICE].map(String::from).to_vec(),
        categorical: [COUNTRY, CHARACTERISTIC].map(String::from).to_vec(),
        ..ColumnSchema::stated("person", "task", "alternative", "chosen")
    }
}

/// Dummy coding with `domestic` and `standard` as references.
pub fn sim_coding() -> CodingPlan {
    CodingPlan::new()
        .dummy(COUNTRY, "domestic")
        .dummy(CHARACTERISTIC, "standard")
}

/// The utility specification matching the generating process: every
/// coefficient normal, no ASCs. In WTP space the price coefficient is
/// negative lognormal.
pub fn sim_model_spec(space: Space) -> ModelSpec {
    let terms = COEFFICIENTS[..5]
        .iter()
        .map(|c| AttributeTerm {
            attribute: c.to_string(),
            coef: c.to_string(),
            labels: None,
        })
        .collect();
    let mut coefficients: Vec<MixingSpec> = COEFFICIENTS
        .iter()
        .map(|c| {
            let sign = if c.starts_with("characteristic_") {
                Sign::Positive
            } else {
                Sign::Negative
            };
            MixingSpec::new(c, Family::Normal).with_sign(sign)
        })
        .collect();
    if space == Space::Wtp {
        coefficients[5].family = Family::LogNormal;
    }
    ModelSpec {
        space,
        asc: vec![],
        terms,
        price: Some(PriceTerm {
            attribute: PRICE.into(),
            coef: PRICE.into(),
        }),
        coefficients,
        rp: None,
    }
}

/// `n` draws from each true distribution (sample-major, one RNG).
pub fn truth_samples(truth: &[TrueCoefficient], n: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols = vec![Vec::with_capacity(n); truth.len()];
    for _ in 0..n {
        for (t, col) in truth.iter().zip(&mut cols) {
            col.push(t.distribution.sample(&mut rng));
        }
    }
    truth.iter().map(|t| t.name.clone()).zip(cols).collect()
}

/// Density grid of each true distribution from
/// [`TRUTH_DENSITY_SAMPLES`] draws.
pub fn truth_densities(
    truth: &[TrueCoefficient],
    seed: u64,
) -> Result<Vec<(String, DensityGrid)>, SimError> {
    truth_samples(truth, TRUTH_DENSITY_SAMPLES, seed)
        .into_iter()
        .map(|(n, s)| Ok((n, density_grid(&s, DEFAULT_BINS)?)))
        .collect()
}
