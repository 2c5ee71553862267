use proptest::prelude::*;

use icym2i::infotheory::{ipw_mutual_info_exact, DiscreteJoint, MiForm};
use icym2i::pid::{marginal_errors, pid_oracle_joint, sinkhorn_project, MarginalPair, OracleConfig, SK_MAX_ROUNDS};

fn joint(ny: usize, n1: usize, n2: usize) -> impl Strategy<Value = DiscreteJoint> {
    prop::collection::vec(0.02f64..1.0, ny * n1 * n2)
        .prop_map(move |m| DiscreteJoint::from_masses(ny, n1, n2, m).unwrap())
}

fn swap_modalities(j: &DiscreteJoint) -> DiscreteJoint {
    let (ny, n1, n2) = j.sizes();
    let mut m = vec![0.0; ny * n1 * n2];
    for y in 0..ny {
        for a in 0..n1 {
            for b in 0..n2 {
                m[(y * n2 + b) * n1 + a] = j.get(y, a, b);
            }
        }
    }
    DiscreteJoint::new(ny, n2, n1, m).unwrap()
}

proptest! {
    #[test]
    fn chain_rule_holds(j in joint(2, 3, 2)) {
        let total = j.mutual_info(MiForm::Total);
        let split = j.mutual_info(MiForm::YX1) + j.mutual_info(MiForm::YX2GivenX1);
        prop_assert!((total - split).abs() < 1e-12);
        prop_assert!(j.mutual_info(MiForm::YX1GivenX2) >= -1e-12);
    }

    #[test]
    fn stabilized_sum_recovers_full_mi(j in joint(2, 2, 2), p in prop::collection::vec(0.05f64..1.0, 4)) {
        // Observation depends on (x1, x2) only.
        let ipw = ipw_mutual_info_exact(&j, |_, a, b| p[a * 2 + b]).unwrap();
        prop_assert!((ipw - j.mutual_info(MiForm::Total)).abs() < 1e-9);
    }

    #[test]
    fn projection_matches_targets_and_is_idempotent(
        j in joint(2, 3, 3),
        start in prop::collection::vec(0.01f64..1.0, 18),
    ) {
        let targets = MarginalPair::from_joint(&j);
        let p = sinkhorn_project(&start, &targets, 1e-9, SK_MAX_ROUNDS).unwrap();
        prop_assert!(p.converged);
        let (e1, e2) = marginal_errors(&p.joint, &targets);
        prop_assert!(e1 <= 1e-6 && e2 <= 1e-6);
        let again = sinkhorn_project(&p.joint, &targets, 1e-9, SK_MAX_ROUNDS).unwrap();
        prop_assert_eq!(again.rounds, 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn oracle_components_are_nonnegative_additive_and_symmetric(j in joint(2, 2, 2)) {
        let cfg = OracleConfig::default();
        let r = pid_oracle_joint(&j, &cfg).unwrap();
        prop_assert!(r.residual <= 1e-9);
        for c in r.components() {
            prop_assert!(c >= -1e-6, "{:?}", r);
        }
        let (u1, u2) = (
            r.unique1 + r.shared,
            r.unique2 + r.shared,
        );
        prop_assert!((u1 - j.mutual_info(MiForm::YX1)).abs() < 1e-6);
        prop_assert!((u2 - j.mutual_info(MiForm::YX2)).abs() < 1e-6);
        let s = pid_oracle_joint(&swap_modalities(&j), &cfg).unwrap();
        prop_assert!((r.unique1 - s.unique2).abs() < 1e-5);
        prop_assert!((r.unique2 - s.unique1).abs() < 1e-5);
        prop_assert!((r.shared - s.shared).abs() < 1e-5);
    }
}
