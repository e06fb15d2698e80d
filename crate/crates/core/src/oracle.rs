//! Brute-force reference computations for tests and experiments.
//!
//! Nothing here reuses the estimator's closed forms: bounds come from a dense
//! scan of the variational objective, from an explicit worst-case
//! distribution, or from a one-dimensional convex minimization.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::dgp::{outcome_mean, true_effect, Covariates, EffectKind, OutcomeParams};
use crate::error::{Error, Result};
use crate::exposure::{ExposureSpec, GRID_TOL};
use crate::netgraph::{khop_neighbors, Graph};

/// Largest neighborhood enumerated exhaustively.
pub const MAX_ENUMERATION_DEGREE: usize = 20;

/// Finite conditional outcome distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteConditional {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscreteConditional {
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != probs.len() {
            return Err(Error::param("support and probabilities must be nonempty and aligned"));
        }
        if support.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::param("support must be strictly increasing"));
        }
        if probs.iter().any(|p| !(*p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::param("probabilities must be nonnegative and sum to one"));
        }
        Ok(Self { support, probs })
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(y, p)| y * p).sum()
    }

    /// `F(y_k)` for every atom.
    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect()
    }

    /// Smallest atom with `F(y) >= level`.
    pub fn quantile(&self, level: f64) -> f64 {
        let cdf = self.cdf();
        let k = cdf.iter().position(|&f| f >= level - 1e-15).unwrap_or(cdf.len() - 1);
        self.support[k]
    }

    /// `q + (1/b_up) E(Y - q)+ - (1/b_low) E(q - Y)+`.
    fn objective(&self, q: f64, b_up: f64, b_low: f64) -> f64 {
        let mut up = 0.0;
        let mut low = 0.0;
        for (y, p) in self.support.iter().zip(&self.probs) {
            up += p * (y - q).max(0.0);
            low += p * (q - y).max(0.0);
        }
        q + up / b_up - low / b_low
    }
}

/// Optima of the variational objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanResult {
    pub upper: f64,
    pub lower: f64,
    pub argmin_upper: f64,
    pub argmax_lower: f64,
}

/// Minimizes `L+(q) = q + E(Y-q)+/b- - E(q-Y)+/b+` and maximizes
/// `L-(q) = q + E(Y-q)+/b+ - E(q-Y)+/b-` over a uniform grid on
/// `[min - 1, max + 1]` together with every atom.
pub fn rockafellar_scan(dc: &DiscreteConditional, b_minus: f64, b_plus: f64, grid_size: usize) -> Result<ScanResult> {
    if grid_size < 10_000 {
        return Err(Error::param("scan grids need at least 10^4 points"));
    }
    let lo = dc.support[0] - 1.0;
    let hi = dc.support[dc.support.len() - 1] + 1.0;
    let grid = (0..grid_size)
        .map(|i| lo + (hi - lo) * i as f64 / (grid_size - 1) as f64)
        .chain(dc.support.iter().copied());
    let mut out = ScanResult {
        upper: f64::INFINITY,
        lower: f64::NEG_INFINITY,
        argmin_upper: f64::NAN,
        argmax_lower: f64::NAN,
    };
    for q in grid {
        let up = dc.objective(q, b_minus, b_plus);
        if up < out.upper {
            out.upper = up;
            out.argmin_upper = q;
        }
        let low = dc.objective(q, b_plus, b_minus);
        if low > out.lower {
            out.lower = low;
            out.argmax_lower = q;
        }
    }
    Ok(out)
}

fn level(b_small: f64, b_large: f64, upper: bool) -> f64 {
    if (b_large - b_small).abs() < 1e-12 {
        return 0.5;
    }
    let a = (1.0 - b_small) * b_large / (b_large - b_small);
    if upper {
        a
    } else {
        1.0 - a
    }
}

/// Worst-case distribution over the atoms of `dc`. The upper one reweights
/// mass below the `alpha+` level by `1/b+` and above it by `1/b-`; the lower
/// one does the reverse around `alpha-`. The atom straddling the level is split.
pub fn tilted_distribution(dc: &DiscreteConditional, b_minus: f64, b_plus: f64, upper: bool) -> Result<Vec<f64>> {
    // levels where the mass switches from the first to the second weight
    let (alpha, w_first, w_second) = if upper {
        (level(b_minus, b_plus, true), 1.0 / b_plus, 1.0 / b_minus)
    } else {
        (level(b_minus, b_plus, false), 1.0 / b_minus, 1.0 / b_plus)
    };
    let cdf = dc.cdf();
    let mut prev = 0.0;
    let tilted: Vec<f64> = cdf
        .iter()
        .zip(&dc.probs)
        .map(|(&f, &p)| {
            let v = if f < alpha {
                p * w_first
            } else if prev > alpha {
                p * w_second
            } else {
                (alpha - prev) * w_first + (f - alpha) * w_second
            };
            prev = f;
            v
        })
        .collect();
    let total: f64 = tilted.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::Construction(format!("tilted masses sum to {total}")));
    }
    Ok(tilted)
}

/// Means of the upper and lower worst-case distributions: `(upper, lower)`.
pub fn tilted_density_bound(dc: &DiscreteConditional, b_minus: f64, b_plus: f64) -> Result<(f64, f64)> {
    let mean = |w: &[f64]| dc.support.iter().zip(w).map(|(y, p)| y * p).sum::<f64>();
    let up = tilted_distribution(dc, b_minus, b_plus, true)?;
    let low = tilted_distribution(dc, b_minus, b_plus, false)?;
    Ok((mean(&up), mean(&low)))
}

/// Finite mixture of normals with a common standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sd: f64,
}

impl NormalMixture {
    pub fn single(mean: f64, sd: f64) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![mean],
            sd,
        }
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    /// `(E(Y - q)+, E(q - Y)+)` in closed form.
    fn tails(&self, q: f64) -> (f64, f64) {
        let n = Normal::new(0.0, 1.0).expect("standard normal");
        let (mut up, mut low) = (0.0, 0.0);
        for (w, m) in self.weights.iter().zip(&self.means) {
            let u = (m - q) / self.sd;
            let pdf = (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let e_up = (m - q) * n.cdf(u) + self.sd * pdf;
            up += w * e_up;
            low += w * (e_up - (m - q));
        }
        (up, low)
    }

    fn objective(&self, q: f64, b_up: f64, b_low: f64) -> f64 {
        let (up, low) = self.tails(q);
        q + up / b_up - low / b_low
    }

    /// Sharp `(lower, upper)` bounds by golden-section search on the convex
    /// variational objectives.
    pub fn sharp_bounds(&self, b_minus: f64, b_plus: f64) -> (f64, f64) {
        let lo = self.means.iter().copied().fold(f64::INFINITY, f64::min) - 12.0 * self.sd;
        let hi = self.means.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 12.0 * self.sd;
        let upper = golden_min(|q| self.objective(q, b_minus, b_plus), lo, hi);
        let lower = -golden_min(|q| -self.objective(q, b_plus, b_minus), lo, hi);
        (lower, upper)
    }
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if b - a < 1e-12 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    f(0.5 * (a + b)).min(fc).min(fd)
}

/// Exact distribution of a node's exposure over all treatment patterns of its
/// pool, as sorted `(z, probability)` pairs.
pub fn enumerate_exposure_distribution(
    g: &Graph,
    node: usize,
    unit_probs: &[f64],
    spec: &ExposureSpec,
) -> Result<Vec<(f64, f64)>> {
    let (pool, weights): (Vec<usize>, Vec<f64>) = match spec {
        ExposureSpec::Mean | ExposureSpec::Threshold { .. } => {
            let nb = g.neighbors(node).to_vec();
            let w = vec![1.0 / nb.len().max(1) as f64; nb.len()];
            (nb, w)
        }
        ExposureSpec::WeightedMean(ew) => (g.neighbors(node).to_vec(), ew.of(node).to_vec()),
        ExposureSpec::KhopMean { radius } => {
            let nb = khop_neighbors(g, node, *radius)?;
            let w = vec![1.0 / nb.len().max(1) as f64; nb.len()];
            (nb, w)
        }
    };
    if pool.is_empty() {
        return Err(Error::IsolatedNode { node });
    }
    if pool.len() > MAX_ENUMERATION_DEGREE {
        return Err(Error::Size(format!(
            "node {node} has {} exposure neighbors; enumeration is limited to {MAX_ENUMERATION_DEGREE}",
            pool.len()
        )));
    }
    let mut atoms: Vec<(f64, f64)> = Vec::with_capacity(1 << pool.len());
    for pattern in 0u32..(1u32 << pool.len()) {
        let mut prob = 1.0;
        let mut share = 0.0;
        for (bit, &j) in pool.iter().enumerate() {
            if pattern >> bit & 1 == 1 {
                prob *= unit_probs[j];
                share += weights[bit];
            } else {
                prob *= 1.0 - unit_probs[j];
            }
        }
        let z = match spec {
            ExposureSpec::Threshold { c } => f64::from(u8::from(share >= c - GRID_TOL)),
            _ => share,
        };
        atoms.push((z, prob));
    }
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (z, p) in atoms {
        match out.last_mut() {
            Some(last) if (z - last.0).abs() < GRID_TOL => last.1 += p,
            _ => out.push((z, p)),
        }
    }
    Ok(out)
}

/// True APO and CAPO values for a realized covariate sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteTruth {
    pub apo: f64,
    pub capo: Vec<f64>,
}

/// `m(t, z, x)` averaged over the realized covariates and evaluated on a grid.
pub fn finite_population_truth(
    x: &Covariates,
    params: &OutcomeParams,
    t: u8,
    z: f64,
    grid: &[Vec<f64>],
) -> FiniteTruth {
    let apo = x.rows().map(|r| outcome_mean(params, t, z, r)).sum::<f64>() / x.len().max(1) as f64;
    FiniteTruth {
        apo,
        capo: grid.iter().map(|r| outcome_mean(params, t, z, r)).collect(),
    }
}

/// Effect truth between two arguments.
pub fn finite_population_effect(params: &OutcomeParams, kind: EffectKind, a: (u8, f64), b: (u8, f64)) -> Result<f64> {
    true_effect(params, kind, a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::gen_erdos_renyi;

    fn uniform_atoms(m: usize) -> DiscreteConditional {
        DiscreteConditional::new(
            (0..m).map(|i| (i as f64 + 0.5) / m as f64).collect(),
            vec![1.0 / m as f64; m],
        )
        .unwrap()
    }

    #[test]
    fn scan_is_flat_at_unit_bounds() {
        let dc = DiscreteConditional::new(vec![-1.0, 0.5, 2.0], vec![0.2, 0.5, 0.3]).unwrap();
        let s = rockafellar_scan(&dc, 1.0, 1.0, 10_000).unwrap();
        assert!((s.upper - dc.mean()).abs() < 1e-12);
        assert!((s.lower - dc.mean()).abs() < 1e-12);
        assert!(rockafellar_scan(&dc, 1.0, 1.0, 100).is_err());
    }

    #[test]
    fn two_point_scan() {
        let dc = DiscreteConditional::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert!((dc.objective(1.0, 0.5, 2.0) - 0.75).abs() < 1e-15);
        assert!((dc.objective(0.0, 0.5, 2.0) - 1.0).abs() < 1e-15);
        let s = rockafellar_scan(&dc, 0.5, 2.0, 10_000).unwrap();
        assert!((s.upper - 0.75).abs() < 1e-12);
        assert!((s.argmin_upper - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tilted_uniform_upper_bound() {
        let dc = uniform_atoms(1000);
        let (up, low) = tilted_density_bound(&dc, 0.5, 2.0).unwrap();
        assert!((up - 2.0 / 3.0).abs() < 2e-3);
        assert!((low - 1.0 / 3.0).abs() < 2e-3);
        let (up, low) = tilted_density_bound(&dc, 1.0, 1.0).unwrap();
        assert!((up - 0.5).abs() < 1e-12 && (low - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tilted_distributions_are_ordered() {
        let dc = DiscreteConditional::new(vec![0.0, 1.0, 2.0, 5.0], vec![0.1, 0.4, 0.3, 0.2]).unwrap();
        let up = tilted_distribution(&dc, 0.4, 3.0, true).unwrap();
        let low = tilted_distribution(&dc, 0.4, 3.0, false).unwrap();
        let (mut fu, mut fp, mut fl) = (0.0, 0.0, 0.0);
        for k in 0..4 {
            fu += up[k];
            fp += dc.probs()[k];
            fl += low[k];
            assert!(fu <= fp + 1e-12 && fp <= fl + 1e-12);
            let (ru, rl) = (up[k] / dc.probs()[k], low[k] / dc.probs()[k]);
            for r in [ru, rl] {
                assert!((1.0 / 3.0 - 1e-12..=1.0 / 0.4 + 1e-12).contains(&r));
            }
        }
    }

    #[test]
    fn mixture_bounds_match_normal_closed_form() {
        // single normal: mu+ = m + sd * phi(z_a) * (1/b- - 1/b+)
        let n = Normal::new(0.0, 1.0).unwrap();
        let (bm, bp) = (0.5, 2.0);
        let a = (1.0 - bm) * bp / (bp - bm);
        let za = n.inverse_cdf(a);
        let phi = (-0.5 * za * za).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let truth = 1.3 + 0.7 * phi * (1.0 / bm - 1.0 / bp);
        let (lo, hi) = NormalMixture::single(1.3, 0.7).sharp_bounds(bm, bp);
        assert!((hi - truth).abs() < 1e-9);
        assert!((lo - (2.6 - truth)).abs() < 1e-9);
    }

    #[test]
    fn mixture_scan_agreement() {
        // fine discretization of a two-component mixture
        let mix = NormalMixture {
            weights: vec![0.3, 0.7],
            means: vec![-1.0, 1.0],
            sd: 0.5,
        };
        let (lo, hi) = mix.sharp_bounds(0.6, 1.8);
        let m = 20_000;
        let n = Normal::new(0.0, 1.0).unwrap();
        let support: Vec<f64> = (0..m).map(|i| -4.0 + 8.0 * (i as f64 + 0.5) / m as f64).collect();
        let mut probs: Vec<f64> = support
            .iter()
            .map(|&y| {
                let h = 4.0 / m as f64;
                mix.weights
                    .iter()
                    .zip(&mix.means)
                    .map(|(w, mu)| w * (n.cdf((y + h - mu) / 0.5) - n.cdf((y - h - mu) / 0.5)))
                    .sum::<f64>()
            })
            .collect();
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= s);
        let dc = DiscreteConditional::new(support, probs).unwrap();
        let (up, low) = tilted_density_bound(&dc, 0.6, 1.8).unwrap();
        assert!((up - hi).abs() < 1e-3 && (low - lo).abs() < 1e-3);
    }

    #[test]
    fn enumeration_small_cases() {
        let g = Graph::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        let p = [0.5; 3];
        let d = enumerate_exposure_distribution(&g, 0, &p, &ExposureSpec::Mean).unwrap();
        assert_eq!(d, vec![(0.0, 0.25), (0.5, 0.5), (1.0, 0.25)]);
        let d = enumerate_exposure_distribution(&g, 0, &p, &ExposureSpec::Threshold { c: 0.5 }).unwrap();
        assert_eq!(d, vec![(0.0, 0.25), (1.0, 0.75)]);
        let star: Vec<(usize, usize)> = (1..=21).map(|j| (0, j)).collect();
        let g = Graph::from_edges(22, &star).unwrap();
        let err = enumerate_exposure_distribution(&g, 0, &[0.5; 22], &ExposureSpec::Mean).unwrap_err();
        assert!(matches!(err, Error::Size(_)));
    }

    #[test]
    fn enumeration_probabilities_sum_to_one() {
        let g = gen_erdos_renyi(30, 0.2, 5).unwrap();
        let p: Vec<f64> = (0..30).map(|i| 0.1 + 0.8 * i as f64 / 30.0).collect();
        for i in 0..30 {
            if g.degree(i) == 0 || g.degree(i) > 12 {
                continue;
            }
            let d = enumerate_exposure_distribution(&g, i, &p, &ExposureSpec::Mean).unwrap();
            assert!((d.iter().map(|a| a.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn truth_of_table_parameters() {
        let x = crate::dgp::sample_covariates(500, 2, 1).unwrap();
        let p = OutcomeParams::default();
        let a = finite_population_truth(&x, &p, 1, 1.0, &[]);
        let b = finite_population_truth(&x, &p, 0, 0.0, &[]);
        assert!((a.apo - b.apo - 1.6).abs() < 1e-12);
        let e = finite_population_effect(&p, EffectKind::Overall, (1, 1.0), (0, 0.0)).unwrap();
        assert!((e - 1.6).abs() < 1e-12);
    }
}
