use mixl_core::draws::{inverse_normal_cdf, mlhs, to_std_normal};
use mixl_core::mixing::{realize, Family, MixingError, MixingSpec, Sign};
use statrs::distribution::{ContinuousCDF, Normal};

#[test]
fn inverse_cdf_agrees_with_statrs() {
    let n = Normal::new(0.0, 1.0).unwrap();
    for i in 1..2000 {
        let p = i as f64 / 2000.0;
        let z = inverse_normal_cdf(p);
        assert!((z - n.inverse_cdf(p)).abs() < 1e-9, "p={p}");
    }
    for p in [1e-10, 1e-6, 1.0 - 1e-6] {
        assert!((inverse_normal_cdf(p) - n.inverse_cdf(p)).abs() < 1e-7 * n.inverse_cdf(p).abs());
    }
}

#[test]
fn mlhs_one_draw_per_stratum() {
    let r = 37;
    let b = mlhs(5, r, 3, 9).unwrap();
    for p in 0..5 {
        for d in 0..3 {
            let mut strata: Vec<usize> = (0..r)
                .map(|i| (b.get(p, i, d) * r as f64) as usize)
                .collect();
            strata.sort_unstable();
            assert_eq!(strata, (0..r).collect::<Vec<_>>());
        }
    }
    assert_eq!(mlhs(5, r, 3, 9).unwrap(), b);
    assert_ne!(mlhs(5, r, 3, 10).unwrap(), b);
}

#[test]
fn realize_checks_draw_kind_and_arity() {
    let u = mlhs(4, 10, 2, 1).unwrap();
    let z = to_std_normal(&u).unwrap();
    let normal = MixingSpec::new("b", Family::Normal);
    assert!(matches!(
        realize(&normal, &[0.0, 1.0], &u, 0),
        Err(MixingError::WrongDrawKind { .. })
    ));
    assert!(matches!(
        realize(&normal, &[0.0], &z, 0),
        Err(MixingError::ArityMismatch { .. })
    ));
    let tri = MixingSpec::new("t", Family::Triangular);
    assert!(realize(&tri, &[-1.0, 1.0], &u, 1).is_err());
    let v = realize(&tri, &[-1.0, 1.0], &u, 0).unwrap();
    assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
}

#[test]
fn log_families_respect_sign() {
    let u = mlhs(50, 20, 1, 3).unwrap();
    let z = to_std_normal(&u).unwrap();
    let neg = MixingSpec::new("p", Family::LogNormal);
    assert!(realize(&neg, &[3.0, 4.0], &z, 0)
        .unwrap()
        .iter()
        .all(|x| *x < 0.0));
    let pos = MixingSpec::new("p", Family::LogUniform).with_sign(Sign::Positive);
    assert!(realize(&pos, &[-800.0, 1.0], &u, 0)
        .unwrap()
        .iter()
        .all(|x| *x > 0.0));
}

#[test]
fn fm_collapses_to_fixed() {
    let u = mlhs(3, 7, 1, 2).unwrap();
    let fm = MixingSpec::new("f", Family::FmPoly(3));
    assert!(realize(&fm, &[1.5, 0.0, 0.0, 0.0], &u, 0)
        .unwrap()
        .iter()
        .all(|x| *x == 1.5));
}
