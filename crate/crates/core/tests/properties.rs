use proptest::prelude::*;

use twophase::io::{read_rule, write_rule, KeyValues};
use twophase::moments::{joint_loss, joint_loss_gradient, BasisSpec, MomentModel};
use twophase::rule::{optimal_rule, solve_threshold_weighted, threshold_spend, Budget, Lambda, SamplingRule};

use std::sync::Arc;

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..10.0, 2..40)
}

fn lambda_strategy() -> impl Strategy<Value = Lambda> {
    let leaf = prop_oneof![
        (0.01f64..5.0).prop_map(Lambda::Constant),
        prop::collection::vec(0.0f64..5.0, 1..5).prop_map(Lambda::Table),
        (prop::collection::vec(-3.0f64..3.0, 6), prop::collection::vec(-3.0f64..3.0, 6)).prop_map(|(g1, g2)| {
            Lambda::Moment(Arc::new(MomentModel {
                basis: BasisSpec {
                    lo: vec![-1.0, 0.0],
                    hi: vec![2.0, 1.5],
                },
                gamma1: g1,
                gamma2: g2,
            }))
        }),
    ];
    leaf.prop_recursive(2, 8, 3, |inner| {
        prop::collection::vec((inner, 0.0f64..1.0), 1..3).prop_map(|parts| {
            let (parts, coef) = parts.into_iter().unzip();
            Lambda::Pooled { parts, coef }
        })
    })
}

fn rule_strategy() -> impl Strategy<Value = SamplingRule> {
    let simple = prop_oneof![
        (0.01f64..1.0).prop_map(SamplingRule::Uniform),
        (lambda_strategy(), 0.0f64..3.0).prop_map(|(lambda, tau)| SamplingRule::Truncated { lambda, tau }),
    ];
    (simple.clone(), prop::collection::vec(simple, 0..3), 0.0f64..1.0).prop_map(|(base, comps, total)| {
        if comps.is_empty() {
            return base;
        }
        let w = total / comps.len() as f64;
        let weights = vec![w; comps.len()];
        SamplingRule::mixture(base, comps, weights).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn threshold_spend_is_non_increasing(s in scores(), a in 0.01f64..20.0, b in 0.01f64..20.0) {
        let w = vec![1.0 / s.len() as f64; s.len()];
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(threshold_spend(&s, &w, hi) <= threshold_spend(&s, &w, lo) + 1e-15);
    }

    #[test]
    fn optimal_rule_spends_budget_and_stays_in_range(s in scores(), frac in 0.02f64..0.98) {
        let n = s.len();
        let probs = vec![1.0 / n as f64; n];
        let budget = Budget::population(&probs, frac).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let rule = optimal_rule(Lambda::Table(s.clone()), &s, &budget).unwrap();
        let rho = rule.eval_rows(&rows);
        prop_assert!(rho.iter().all(|r| *r > 0.0 && *r <= 1.0));
        prop_assert!(budget.residual(&rho).abs() <= 1e-8);
    }

    #[test]
    fn two_phase_budget_ignores_pilot_units(
        s in scores(),
        mask in prop::collection::vec(any::<bool>(), 40),
        kappa in 0.0f64..0.1,
        extra in 0.05f64..0.5,
    ) {
        let n = s.len();
        let pilot: Vec<bool> = mask[..n].to_vec();
        let eligible = pilot.iter().filter(|p| !**p).count() as f64 / n as f64;
        let varpi = kappa + extra;
        prop_assume!(eligible > extra + 1e-6);
        let budget = Budget::two_phase(&pilot, varpi, kappa).unwrap();
        let tau = solve_threshold_weighted(&s, &budget.weights, budget.total).unwrap();
        let rho: Vec<f64> = s.iter().map(|x| (x / tau).min(1.0)).collect();
        prop_assert!(budget.residual(&rho).abs() <= 1e-8);
    }

    #[test]
    fn mixtures_stay_in_unit_interval(rule in rule_strategy(), y in -1.0f64..2.5) {
        let r = rule.eval(&[0.0, y]);
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn rule_serialisation_round_trips(rule in rule_strategy()) {
        let mut kv = KeyValues::default();
        write_rule(&mut kv, "rule.x", &rule);
        let parsed = KeyValues::parse(&kv.to_text()).unwrap();
        prop_assert_eq!(read_rule(&parsed, "rule.x").unwrap(), rule);
    }

    #[test]
    fn loss_gradient_matches_differences(
        g1 in prop::collection::vec(-1.5f64..1.5, 3),
        g2 in prop::collection::vec(-1.5f64..1.5, 3),
        psi in prop::collection::vec(-3.0f64..3.0, 20),
    ) {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 19.0]).collect();
        let basis = BasisSpec::from_rows(&rows).unwrap();
        let p = basis.design(&rows);
        let (a1, a2) = joint_loss_gradient(&g1, &g2, &psi, &p, 0.2);
        let h = 1e-6;
        for idx in 0..6 {
            let eval = |s: f64| {
                let (mut x1, mut x2) = (g1.clone(), g2.clone());
                if idx < 3 { x1[idx] += s } else { x2[idx - 3] += s }
                joint_loss(&x1, &x2, &psi, &p, 0.2)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = if idx < 3 { a1[idx] } else { a2[idx - 3] };
            prop_assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "coordinate {idx}: {fd} vs {an}");
        }
    }

    #[test]
    fn loss_is_convex_in_each_block(
        fixed in prop::collection::vec(-1.5f64..1.5, 3),
        a in prop::collection::vec(-2.0f64..2.0, 3),
        b in prop::collection::vec(-2.0f64..2.0, 3),
        t in 0.0f64..1.0,
        psi in prop::collection::vec(-3.0f64..3.0, 20),
    ) {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 19.0]).collect();
        let basis = BasisSpec::from_rows(&rows).unwrap();
        let p = basis.design(&rows);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        for first in [true, false] {
            let f = |g: &[f64]| if first {
                joint_loss(g, &fixed, &psi, &p, 0.2)
            } else {
                joint_loss(&fixed, g, &psi, &p, 0.2)
            };
            let chord = t * f(&a) + (1.0 - t) * f(&b);
            prop_assert!(f(&mix) <= chord + 1e-10 * chord.abs().max(1.0));
        }
    }
}
