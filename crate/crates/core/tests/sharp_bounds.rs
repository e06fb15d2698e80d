//! Closed-form sharp bounds against the brute-force oracles.

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use netbound::estimator::{capo_closed_form, Sign};
use netbound::oracle::{rockafellar_scan, tilted_density_bound, tilted_distribution, DiscreteConditional};
use netbound::sensitivity::{alpha_levels, BoundPair};

fn conditional(atoms: &[(f64, f64)]) -> DiscreteConditional {
    let mut support: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut sorted = atoms.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (y, w) in sorted {
        if support.last().is_some_and(|&last| y - last < 1e-6) {
            *weights.last_mut().unwrap() += w;
        } else {
            support.push(y);
            weights.push(w);
        }
    }
    let total: f64 = weights.iter().sum();
    let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let rest: f64 = probs[1..].iter().sum();
    probs[0] = 1.0 - rest;
    DiscreteConditional::new(support, probs).unwrap()
}

fn closed_form(dc: &DiscreteConditional, b: BoundPair) -> (f64, f64) {
    let a = alpha_levels(b);
    let tails = |q: f64| {
        let gu: f64 = dc.support().iter().zip(dc.probs()).map(|(y, p)| p * (y - q).max(0.0)).sum();
        let gl: f64 = dc.support().iter().zip(dc.probs()).map(|(y, p)| p * (q - y).max(0.0)).sum();
        (gu, gl)
    };
    let qp = dc.quantile(a.alpha_plus);
    let qm = dc.quantile(a.alpha_minus);
    let (gu_p, gl_p) = tails(qp);
    let (gu_m, gl_m) = tails(qm);
    (
        capo_closed_form(Sign::Lower, qm, gu_m, gl_m, b),
        capo_closed_form(Sign::Upper, qp, gu_p, gl_p, b),
    )
}

fn atoms() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-5.0..5.0f64, 0.01..1.0f64), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn closed_form_matches_scan_and_tilt(a in atoms(), bm in 0.05..1.0f64, bp in 1.0..20.0f64) {
        let dc = conditional(&a);
        let b = BoundPair { b_minus: bm, b_plus: bp };
        let (lo, hi) = closed_form(&dc, b);
        let scan = rockafellar_scan(&dc, bm, bp, 10_000).unwrap();
        let (t_hi, t_lo) = tilted_density_bound(&dc, bm, bp).unwrap();
        prop_assert!((scan.upper - hi).abs() < 1e-6);
        prop_assert!((scan.lower - lo).abs() < 1e-6);
        prop_assert!((t_hi - hi).abs() < 1e-6);
        prop_assert!((t_lo - lo).abs() < 1e-6);
        prop_assert!(lo <= dc.mean() + 1e-9 && dc.mean() <= hi + 1e-9);
    }

    #[test]
    fn tilted_masses_respect_ratio_bounds(a in atoms(), bm in 0.05..1.0f64, bp in 1.0..20.0f64) {
        let dc = conditional(&a);
        for upper in [true, false] {
            let w = tilted_distribution(&dc, bm, bp, upper).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (m, p) in w.iter().zip(dc.probs()) {
                prop_assert!(*m >= p / bp - 1e-12 && *m <= p / bm + 1e-12);
            }
        }
    }

    #[test]
    fn bounds_widen_with_sensitivity(a in atoms(), s in 1.0..10.0f64, grow in 1.0..5.0f64) {
        let dc = conditional(&a);
        let narrow = closed_form(&dc, BoundPair { b_minus: 1.0 / s, b_plus: s });
        let wide = closed_form(&dc, BoundPair { b_minus: 1.0 / (s * grow), b_plus: s * grow });
        prop_assert!(wide.0 <= narrow.0 + 1e-12);
        prop_assert!(wide.1 >= narrow.1 - 1e-12);
    }
}

#[test]
fn identity_bounds_collapse_to_the_mean() {
    let dc = conditional(&[(0.0, 0.2), (1.0, 0.5), (3.0, 0.3)]);
    let (lo, hi) = closed_form(&dc, BoundPair { b_minus: 1.0, b_plus: 1.0 });
    assert_abs_diff_eq!(lo, dc.mean(), epsilon = 1e-12);
    assert_abs_diff_eq!(hi, dc.mean(), epsilon = 1e-12);
}

#[test]
fn extreme_bounds_reach_the_support() {
    let dc = conditional(&[(-1.0, 0.3), (0.5, 0.4), (2.0, 0.3)]);
    let mut prev = f64::NEG_INFINITY;
    for k in 0..=30 {
        let s = 10f64.powf(k as f64 / 5.0);
        let (_, hi) = closed_form(&dc, BoundPair { b_minus: 1.0 / s, b_plus: s });
        assert!(hi >= prev - 1e-12);
        prev = hi;
    }
    assert!(2.0 - prev < 1e-5, "upper bound {prev} did not approach the support maximum");
}
