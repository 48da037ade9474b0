#![allow(dead_code)]

use std::collections::BTreeMap;

use mixl_core::data::{Alternative, ChoiceDataset, DataMode, PanelPerson, Task};
use mixl_core::estimation::{
    ConvergenceReport, ConvergenceStatus, Fingerprint, FitResult, ParamEstimate, FIT_FORMAT,
};
use mixl_core::mixing::{Family, MixingSpec};
use mixl_core::models::{AttributeTerm, ModelSpec, Space};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random panel with attributes `x0..x{k-1}` and uniformly random choices.
pub fn random_panel(
    n_persons: usize,
    n_tasks: usize,
    n_alts: usize,
    n_attrs: usize,
    seed: u64,
) -> ChoiceDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let persons = (0..n_persons)
        .map(|p| PanelPerson {
            id: format!("p{p}"),
            tasks: (0..n_tasks)
                .map(|t| Task {
                    id: t.to_string(),
                    alternatives: (0..n_alts)
                        .map(|j| Alternative {
                            label: format!("a{j}"),
                            values: (0..n_attrs).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                            levels: vec![],
                        })
                        .collect(),
                    chosen_index: rng.gen_range(0..n_alts),
                })
                .collect(),
            covariates: BTreeMap::new(),
        })
        .collect();
    ChoiceDataset {
        persons,
        attribute_names: (0..n_attrs).map(|k| format!("x{k}")).collect(),
        categorical_names: vec![],
        covariate_names: vec![],
        alternative_labels: (0..n_alts).map(|j| format!("a{j}")).collect(),
        mode: DataMode::StatedPanel,
    }
}

/// One coefficient per attribute, `b{k}` on `x{k}`, with the given families.
pub fn linear_spec(families: &[Family]) -> ModelSpec {
    ModelSpec {
        space: Space::Preference,
        asc: vec![],
        terms: (0..families.len())
            .map(|k| AttributeTerm {
                attribute: format!("x{k}"),
                coef: format!("b{k}"),
                labels: None,
            })
            .collect(),
        price: None,
        coefficients: families
            .iter()
            .enumerate()
            .map(|(k, f)| MixingSpec::new(&format!("b{k}"), *f))
            .collect(),
        rp: None,
    }
}

/// A fit artifact for a single fixed coefficient, without data.
pub fn fixed_fit(label: &str, value: f64, loglik: f64, person_ids: &[String]) -> FitResult {
    let spec = linear_spec(&[Family::Fixed]);
    FitResult {
        format: FIT_FORMAT.into(),
        label: label.into(),
        spec: spec.clone(),
        params: vec![ParamEstimate {
            name: "b0".into(),
            estimate: value,
            std_error: None,
            reported: value,
        }],
        loglik,
        aic: 2.0 - 2.0 * loglik,
        bic: 0.0,
        n_obs: person_ids.len(),
        k: 1,
        convergence: ConvergenceReport {
            status: ConvergenceStatus::Converged,
            iterations: 0,
            grad_norm: 0.0,
            starts: 1,
        },
        fingerprint: Fingerprint {
            seed: 1,
            n_draws: 1,
            space: Space::Preference,
            families: vec![],
        },
        person_ids: person_ids.to_vec(),
        person_probs: vec![0.5; person_ids.len()],
        floored: 0,
        data: None,
    }
}
