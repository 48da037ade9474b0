mod common;

use std::collections::BTreeMap;

use mixl_core::data::{
    apply_coding, Alternative, ChoiceDataset, CodingPlan, DataMode, PanelPerson, Task,
};
use mixl_core::mixing::Family;
use mixl_core::models::{log_choice_prob, mnl_prob, Model};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_is_a_simplex(v in prop::collection::vec(-50.0f64..50.0, 1..8)) {
        let p = mnl_prob(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
        for (j, pj) in p.iter().enumerate() {
            prop_assert!((log_choice_prob(&v, j).exp() - pj).abs() < 1e-12);
        }
    }

    #[test]
    fn shares_ignore_person_order(seed in 0u64..50, mu in -1.0f64..1.0, sigma in 0.0f64..1.0) {
        let data = common::random_panel(6, 3, 3, 2, seed);
        let spec = common::linear_spec(&[Family::Normal, Family::Fixed]);
        let mut rev = data.clone();
        rev.persons.reverse();
        let a = Model::compile(&spec, &data).unwrap();
        let b = Model::compile(&spec, &rev).unwrap();
        let sa = a.shares(&a.draws(1, 1).unwrap(), &[mu, 0.0, 0.3]).unwrap();
        let sb = b.shares(&b.draws(1, 1).unwrap(), &[mu, 0.0, 0.3]).unwrap();
        for (x, y) in sa.iter().zip(&sb) {
            prop_assert!((x.1 - y.1).abs() < 1e-12);
        }
        let s = a.shares(&a.draws(10, 2).unwrap(), &[mu, sigma, 0.3]).unwrap();
        prop_assert!((s.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn dummy_coding_is_exclusive(levels in prop::collection::vec(0usize..4, 1..30)) {
        let names = ["low", "mid", "high", "top"];
        let persons = vec![PanelPerson {
            id: "1".into(),
            tasks: levels
                .iter()
                .enumerate()
                .map(|(i, l)| Task {
                    id: i.to_string(),
                    alternatives: vec![
                        Alternative { label: "a".into(), values: vec![], levels: vec![names[*l].into()] },
                        Alternative { label: "b".into(), values: vec![], levels: vec!["low".into()] },
                    ],
                    chosen_index: 0,
                })
                .collect(),
            covariates: BTreeMap::new(),
        }];
        let data = ChoiceDataset {
            persons,
            attribute_names: vec![],
            categorical_names: vec!["lvl".into()],
            covariate_names: vec![],
            alternative_labels: vec!["a".into(), "b".into()],
            mode: DataMode::StatedPanel,
        };
        let coded = apply_coding(&data, &CodingPlan::new().dummy("lvl", "low")).unwrap();
        for (t, raw) in coded.persons[0].tasks.iter().zip(&data.persons[0].tasks) {
            for (alt, raw) in t.alternatives.iter().zip(&raw.alternatives) {
                let ones = alt.values.iter().filter(|v| **v == 1.0).count();
                prop_assert!(alt.values.iter().all(|v| *v == 0.0 || *v == 1.0));
                prop_assert!(ones <= 1);
                prop_assert_eq!(ones == 0, raw.levels[0] == "low");
            }
        }
    }
}
