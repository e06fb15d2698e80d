//! Analytic exposure probabilities against exhaustive enumeration.

use proptest::prelude::*;

use netbound::dgp::{sample_covariates, true_propensity};
use netbound::exposure::ExposureSpec;
use netbound::learners::{analytic_count_pmfs, analytic_exposure_prob, FnPredictor};
use netbound::netgraph::gen_erdos_renyi;
use netbound::oracle::enumerate_exposure_distribution;
use netbound::sensitivity::poisson_binomial_pmf;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_matches_enumeration(seed in 0u64..10_000, c in 0.1..0.9f64, beta in -2.0..2.0f64) {
        let g = gen_erdos_renyi(40, 0.12, seed).unwrap().without_isolates().0;
        prop_assume!(g.node_count() > 0);
        let x = sample_covariates(g.node_count(), 1, seed + 1).unwrap();
        let unit: Vec<f64> = x.rows().map(|r| true_propensity(r, &[beta])).collect();
        let prop = FnPredictor(move |r: &[f64]| true_propensity(r, &[beta]));
        for spec in [ExposureSpec::Mean, ExposureSpec::Threshold { c }] {
            let pmfs = analytic_count_pmfs(&g, &spec, &x, &prop).unwrap();
            for i in 0..g.node_count() {
                if g.degree(i) > 12 {
                    continue;
                }
                let exact = enumerate_exposure_distribution(&g, i, &unit, &spec).unwrap();
                let total: f64 = exact.iter().map(|(_, p)| p).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                for (z, p) in exact {
                    let a = analytic_exposure_prob(&spec, &pmfs[i], z).unwrap().unwrap();
                    prop_assert!((a - p).abs() < 1e-12, "node {} z {}: {} vs {}", i, z, a, p);
                }
            }
        }
    }

    #[test]
    fn poisson_binomial_is_a_distribution(probs in prop::collection::vec(0.0..1.0f64, 1..30)) {
        let pmf = poisson_binomial_pmf(&probs).unwrap();
        prop_assert_eq!(pmf.len(), probs.len() + 1);
        prop_assert!(pmf.iter().all(|p| *p >= -1e-15));
        prop_assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mean: f64 = pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        prop_assert!((mean - probs.iter().sum::<f64>()).abs() < 1e-10);
    }
}
