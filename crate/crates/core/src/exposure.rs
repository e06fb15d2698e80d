//! Exposure mappings: summaries of the neighbors' treatments.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{khop_neighbors, Graph};
use crate::rng;

/// Tolerance used when deciding whether an exposure value lies on a node's grid.
pub const GRID_TOL: f64 = 1e-9;

/// Per directed edge `i <- j` influence weights, aligned with
/// `Graph::neighbors(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    per_node: Vec<Vec<f64>>,
}

impl EdgeWeights {
    pub fn new(g: &Graph, per_node: Vec<Vec<f64>>) -> Result<Self> {
        if per_node.len() != g.node_count() {
            return Err(Error::param("one weight list per node is required"));
        }
        for (i, w) in per_node.iter().enumerate() {
            if w.len() != g.degree(i) {
                return Err(Error::param(format!(
                    "node {i}: {} weights for degree {}",
                    w.len(),
                    g.degree(i)
                )));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::param(format!(
                    "node {i}: weights must be finite and nonnegative"
                )));
            }
        }
        Ok(Self { per_node })
    }

    /// Weights `1 / n_i`, which make the weighted mean equal the plain mean.
    pub fn uniform(g: &Graph) -> Self {
        let per_node = (0..g.node_count())
            .map(|i| {
                let n = g.degree(i);
                vec![1.0 / n.max(1) as f64; n]
            })
            .collect();
        Self { per_node }
    }

    /// Weights drawn independently from `U[1/n_i - eps, 1/n_i + eps]`, left
    /// unnormalized. The lower end is clamped at zero for nodes with
    /// `eps > 1/n_i`.
    pub fn perturbed(g: &Graph, eps: f64, seed: u64) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::param(format!("weight slack {eps} must be >= 0")));
        }
        let mut rng = rng::seeded(seed);
        let per_node = (0..g.node_count())
            .map(|i| {
                let n = g.degree(i);
                let base = 1.0 / n.max(1) as f64;
                let lo = (base - eps).max(0.0);
                let hi = base + eps;
                (0..n)
                    .map(|_| lo + (hi - lo) * rng.random::<f64>())
                    .collect()
            })
            .collect();
        Ok(Self { per_node })
    }

    pub fn of(&self, i: usize) -> &[f64] {
        &self.per_node[i]
    }
}

/// How neighbors' treatments are summarized into a scalar exposure.
#[derive(Debug, Clone, PartialEq)]
pub enum ExposureSpec {
    /// Share of treated neighbors.
    Mean,
    /// `sum_j w_ij t_j` over neighbors.
    WeightedMean(EdgeWeights),
    /// `1[share of treated neighbors >= c]`.
    Threshold { c: f64 },
    /// Share of treated nodes within shortest-path distance `radius`.
    KhopMean { radius: usize },
}

impl ExposureSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ExposureSpec::Threshold { c } if !(0.0..=1.0).contains(c) => {
                Err(Error::param(format!("threshold level {c} is not in [0, 1]")))
            }
            ExposureSpec::KhopMean { radius: 0 } => Err(Error::param("khop radius must be >= 1")),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExposureSpec::Mean => "mean",
            ExposureSpec::WeightedMean(_) => "weighted_mean",
            ExposureSpec::Threshold { .. } => "threshold",
            ExposureSpec::KhopMean { .. } => "khop_mean",
        }
    }

    /// Whether exposures take finitely many values per node.
    pub fn support_kind(&self) -> SupportKind {
        match self {
            ExposureSpec::WeightedMean(_) => SupportKind::Continuous,
            _ => SupportKind::Discrete,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportKind {
    Discrete,
    Continuous,
}

/// Per-node exposure values.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureVector {
    pub values: Vec<f64>,
    pub support_kind: SupportKind,
}

/// The set of nodes whose treatments enter node `i`'s exposure.
pub fn exposure_pool(spec: &ExposureSpec, g: &Graph, i: usize) -> Result<Vec<usize>> {
    match spec {
        ExposureSpec::KhopMean { radius } => khop_neighbors(g, i, *radius),
        _ => Ok(g.neighbors(i).to_vec()),
    }
}

fn check_treatments(g: &Graph, t: &[u8]) -> Result<()> {
    if t.len() != g.node_count() {
        return Err(Error::param(format!(
            "treatment vector has length {}, graph has {} nodes",
            t.len(),
            g.node_count()
        )));
    }
    if t.iter().any(|&v| v > 1) {
        return Err(Error::param("treatments must be binary"));
    }
    Ok(())
}

/// Evaluates the exposure mapping for every node.
pub fn apply_exposure(spec: &ExposureSpec, g: &Graph, t: &[u8]) -> Result<ExposureVector> {
    spec.validate()?;
    check_treatments(g, t)?;
    let n = g.node_count();
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let nb = g.neighbors(i);
        if nb.is_empty() {
            return Err(Error::IsolatedNode { node: i });
        }
        let treated = || nb.iter().filter(|&&j| t[j] == 1).count();
        let z = match spec {
            ExposureSpec::Mean => treated() as f64 / nb.len() as f64,
            ExposureSpec::Threshold { c } => {
                // closed at c, with a tolerance so that e.g. 9/20 >= 0.45 holds
                let share = treated() as f64 / nb.len() as f64;
                if share >= c - GRID_TOL {
                    1.0
                } else {
                    0.0
                }
            }
            ExposureSpec::WeightedMean(w) => nb
                .iter()
                .zip(w.of(i))
                .map(|(&j, &wj)| wj * f64::from(t[j]))
                .sum(),
            ExposureSpec::KhopMean { radius } => {
                let pool = khop_neighbors(g, i, *radius)?;
                pool.iter().filter(|&&j| t[j] == 1).count() as f64 / pool.len() as f64
            }
        };
        values.push(z);
    }
    Ok(ExposureVector {
        values,
        support_kind: spec.support_kind(),
    })
}

/// Exposure values a single node can take.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeSupport {
    Grid(Vec<f64>),
    Interval { lo: f64, hi: f64 },
}

impl NodeSupport {
    pub fn contains(&self, z: f64) -> bool {
        match self {
            NodeSupport::Grid(levels) => levels.iter().any(|&v| (v - z).abs() < GRID_TOL),
            NodeSupport::Interval { lo, hi } => (*lo - GRID_TOL..=*hi + GRID_TOL).contains(&z),
        }
    }
}

fn share_grid(n: usize) -> Vec<f64> {
    (0..=n).map(|k| k as f64 / n as f64).collect()
}

/// Describes the exposure support of node `i` under `spec`.
pub fn exposure_support(spec: &ExposureSpec, g: &Graph, i: usize) -> Result<NodeSupport> {
    let n = g.degree(i);
    Ok(match spec {
        ExposureSpec::Mean => NodeSupport::Grid(share_grid(n)),
        ExposureSpec::Threshold { .. } => NodeSupport::Grid(vec![0.0, 1.0]),
        ExposureSpec::KhopMean { radius } => {
            NodeSupport::Grid(share_grid(khop_neighbors(g, i, *radius)?.len()))
        }
        ExposureSpec::WeightedMean(w) => {
            let wi = w.of(i);
            let first = wi.first().copied().unwrap_or(0.0);
            if wi.iter().all(|&v| (v - first).abs() < 1e-15) {
                NodeSupport::Grid((0..=n).map(|k| k as f64 * first).collect())
            } else {
                NodeSupport::Interval {
                    lo: 0.0,
                    hi: wi.iter().sum(),
                }
            }
        }
    })
}

/// Count `k` with `k / n == z`, if `z` lies on the share grid of size `n`.
pub fn grid_count(z: f64, n: usize) -> Option<usize> {
    let k = (z * n as f64).round();
    if k < 0.0 || k > n as f64 || (z * n as f64 - k).abs() > GRID_TOL * n.max(1) as f64 {
        None
    } else {
        Some(k as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::gen_erdos_renyi;
    use proptest::prelude::*;

    fn star() -> Graph {
        Graph::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap()
    }

    fn random_t(n: usize, seed: u64) -> Vec<u8> {
        let mut rng = rng::seeded(seed);
        (0..n).map(|_| u8::from(rng.random::<bool>())).collect()
    }

    #[test]
    fn star_center_mean_and_threshold() {
        let g = star();
        let t = [0, 1, 0, 1];
        let mean = apply_exposure(&ExposureSpec::Mean, &g, &t).unwrap();
        assert!((mean.values[0] - 2.0 / 3.0).abs() < 1e-15);
        let hi = apply_exposure(&ExposureSpec::Threshold { c: 0.5 }, &g, &t).unwrap();
        assert_eq!(hi.values[0], 1.0);
        let lo = apply_exposure(&ExposureSpec::Threshold { c: 0.7 }, &g, &t).unwrap();
        assert_eq!(lo.values[0], 0.0);
    }

    #[test]
    fn isolated_nodes_are_rejected() {
        let g = Graph::from_edges(3, &[(0, 1)]).unwrap();
        let err = apply_exposure(&ExposureSpec::Mean, &g, &[1, 0, 1]).unwrap_err();
        assert!(matches!(err, Error::IsolatedNode { node: 2 }));
    }

    #[test]
    fn uniform_weights_match_mean() {
        for seed in 0..50 {
            let (g, _) = gen_erdos_renyi(40, 0.15, seed).unwrap().without_isolates();
            let t = random_t(g.node_count(), seed + 100);
            let spec = ExposureSpec::WeightedMean(EdgeWeights::uniform(&g));
            let a = apply_exposure(&spec, &g, &t).unwrap();
            let b = apply_exposure(&ExposureSpec::Mean, &g, &t).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn support_descriptions() {
        let ring = Graph::from_edges(
            6,
            &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3), (1, 4), (2, 5)],
        )
        .unwrap();
        // 3-regular; build a 4-regular one for the documented example
        let k5 = Graph::from_edges(
            5,
            &[(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)],
        )
        .unwrap();
        assert_eq!(
            exposure_support(&ExposureSpec::Mean, &k5, 0).unwrap(),
            NodeSupport::Grid(vec![0.0, 0.25, 0.5, 0.75, 1.0])
        );
        assert_eq!(
            exposure_support(&ExposureSpec::Threshold { c: 0.5 }, &ring, 2).unwrap(),
            NodeSupport::Grid(vec![0.0, 1.0])
        );
        let w = EdgeWeights::perturbed(&ring, 0.05, 3).unwrap();
        assert!(matches!(
            exposure_support(&ExposureSpec::WeightedMean(w), &ring, 0).unwrap(),
            NodeSupport::Interval { .. }
        ));
    }

    #[test]
    fn perturbed_weights_stay_in_slack_band() {
        let (g, _) = gen_erdos_renyi(100, 0.1, 1).unwrap().without_isolates();
        let w = EdgeWeights::perturbed(&g, 0.03, 9).unwrap();
        for i in 0..g.node_count() {
            let base = 1.0 / g.degree(i) as f64;
            assert!(w.of(i).iter().all(|&v| v >= 0.0 && (v - base).abs() <= 0.03 + 1e-15));
        }
    }

    #[test]
    fn grid_count_recognizes_levels() {
        assert_eq!(grid_count(0.5, 10), Some(5));
        assert_eq!(grid_count(0.45, 20), Some(9));
        assert_eq!(grid_count(0.5, 7), None);
        assert_eq!(grid_count(1.0, 3), Some(3));
    }

    proptest! {
        #[test]
        fn mean_exposure_counts_are_integers(seed in 0u64..500) {
            let (g, _) = gen_erdos_renyi(30, 0.2, seed).unwrap().without_isolates();
            let t = random_t(g.node_count(), seed ^ 77);
            let z = apply_exposure(&ExposureSpec::Mean, &g, &t).unwrap();
            for i in 0..g.node_count() {
                let treated = g.neighbors(i).iter().filter(|&&j| t[j] == 1).count();
                prop_assert!((z.values[i] * g.degree(i) as f64 - treated as f64).abs() < 1e-9);
            }
        }

        #[test]
        fn threshold_is_indicator_of_mean(seed in 0u64..500, c in 0.0f64..=1.0) {
            let (g, _) = gen_erdos_renyi(30, 0.2, seed).unwrap().without_isolates();
            let t = random_t(g.node_count(), seed ^ 5);
            let mean = apply_exposure(&ExposureSpec::Mean, &g, &t).unwrap();
            let thr = apply_exposure(&ExposureSpec::Threshold { c }, &g, &t).unwrap();
            for (m, z) in mean.values.iter().zip(&thr.values) {
                prop_assert_eq!(*z, if *m >= c - GRID_TOL { 1.0 } else { 0.0 });
            }
        }

        #[test]
        fn khop_radius_one_is_mean(seed in 0u64..300) {
            let (g, _) = gen_erdos_renyi(30, 0.15, seed).unwrap().without_isolates();
            let t = random_t(g.node_count(), seed ^ 13);
            let a = apply_exposure(&ExposureSpec::KhopMean { radius: 1 }, &g, &t).unwrap();
            let b = apply_exposure(&ExposureSpec::Mean, &g, &t).unwrap();
            prop_assert_eq!(a.values, b.values);
        }

        #[test]
        fn weighted_mean_is_linear_in_treatments(seed in 0u64..300) {
            let (g, _) = gen_erdos_renyi(30, 0.2, seed).unwrap().without_isolates();
            let n = g.node_count();
            let spec = ExposureSpec::WeightedMean(EdgeWeights::perturbed(&g, 0.02, seed).unwrap());
            let both = random_t(n, seed ^ 21);
            let split = random_t(n, seed ^ 22);
            let t1: Vec<u8> = both.iter().zip(&split).map(|(a, s)| a & s).collect();
            let t2: Vec<u8> = both.iter().zip(&split).map(|(a, s)| a & (1 - s)).collect();
            let z = |t: &[u8]| apply_exposure(&spec, &g, t).unwrap().values;
            let (z1, z2, z12, z0) = (z(&t1), z(&t2), z(&both), z(&vec![0; n]));
            for i in 0..n {
                prop_assert!((z1[i] + z2[i] - z0[i] - z12[i]).abs() < 1e-12);
            }
        }
    }
}
