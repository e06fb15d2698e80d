//! Property studies: oracle agreement, pseudo-outcome unbiasedness,
//! orthogonality under injected nuisance errors, kernel consistency and
//! exposure-propensity exactness.

use anyhow::{bail, Result};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use netbound::dgp::{
    outcome_mean, sample_covariates, true_propensity, ContinuousDesign, OutcomeParams, F_SCALAR_MEAN,
};
use netbound::estimator::{capo_closed_form, estimate_all, mean_var, pseudo_outcome, KernelShape, KernelSpec, Localization, Sign};
use netbound::exposure::ExposureSpec;
use netbound::learners::{
    analytic_count_pmfs, analytic_exposure_prob, CrossfitConfig, CrossfitData, ExposureMode, FnPredictor, LearnerSpec,
    RowNuisance, Target,
};
use netbound::netgraph::gen_erdos_renyi;
use netbound::oracle::{enumerate_exposure_distribution, rockafellar_scan, tilted_density_bound, DiscreteConditional, NormalMixture};
use netbound::rng::{child_seed, seeded};
use netbound::sensitivity::{alpha_levels, BoundPair, MisspecKind, MisspecModel};

/// Largest disagreement among closed form, scan and tilted distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub instances: usize,
    pub max_deviation: f64,
}

/// Random discrete conditional with 2 to 30 atoms.
pub fn random_conditional(r: &mut impl rand::Rng) -> DiscreteConditional {
    let m = r.random_range(2..=30);
    let mut support: Vec<f64> = Vec::with_capacity(m);
    let mut y = r.random_range(-5.0..5.0);
    for _ in 0..m {
        support.push(y);
        y += r.random_range(0.01..1.5);
    }
    let raw: Vec<f64> = (0..m).map(|_| r.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut probs: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let head: f64 = probs[..m - 1].iter().sum();
    probs[m - 1] = 1.0 - head;
    DiscreteConditional::new(support, probs).expect("valid random conditional")
}

/// Random valid ratio bounds with `b- in [0.05, 1]` and `b+ in [1, 20]`.
pub fn random_bounds(r: &mut impl rand::Rng) -> BoundPair {
    BoundPair {
        b_minus: r.random_range(0.05..=1.0),
        b_plus: r.random_range(1.0..=20.0),
    }
}

/// Closed-form bounds `(lo, hi)` of a discrete conditional via the
/// estimator's formula with exact quantiles and tail moments.
pub fn closed_form_bounds(dc: &DiscreteConditional, b: BoundPair) -> (f64, f64) {
    let a = alpha_levels(b);
    let tails = |q: f64| {
        let mut up = 0.0;
        let mut low = 0.0;
        for (y, p) in dc.support().iter().zip(dc.probs()) {
            up += p * (y - q).max(0.0);
            low += p * (q - y).max(0.0);
        }
        (up, low)
    };
    let qp = dc.quantile(a.alpha_plus);
    let (gu, gl) = tails(qp);
    let hi = capo_closed_form(Sign::Upper, qp, gu, gl, b);
    let qm = dc.quantile(a.alpha_minus);
    let (gu, gl) = tails(qm);
    let lo = capo_closed_form(Sign::Lower, qm, gu, gl, b);
    (lo, hi)
}

/// Closed form, variational scan and tilted-distribution mean on random instances.
pub fn three_way_agreement(instances: usize, seed: u64) -> Result<Agreement> {
    let devs: Vec<f64> = (0..instances)
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let mut r = seeded(child_seed(seed, k as u64));
            let dc = random_conditional(&mut r);
            let b = random_bounds(&mut r);
            let (lo, hi) = closed_form_bounds(&dc, b);
            let scan = rockafellar_scan(&dc, b.b_minus, b.b_plus, 10_000)?;
            let (t_hi, t_lo) = tilted_density_bound(&dc, b.b_minus, b.b_plus)?;
            Ok([
                (hi - scan.upper).abs(),
                (hi - t_hi).abs(),
                (scan.upper - t_hi).abs(),
                (lo - scan.lower).abs(),
                (lo - t_lo).abs(),
                (scan.lower - t_lo).abs(),
            ]
            .into_iter()
            .fold(0.0, f64::max))
        })
        .collect::<Result<_>>()?;
    Ok(Agreement {
        instances,
        max_deviation: devs.into_iter().fold(0.0, f64::max),
    })
}

/// Non-network design with a binary exposure and fully known nuisances:
/// `X ~ U(-1, 1)`, `T | X` and `Z | X` logistic, Gaussian outcomes from the
/// simulation surface, constant ratio bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IidDesign {
    pub outcome: OutcomeParams,
    pub beta_t: f64,
    pub z_intercept: f64,
    pub z_slope: f64,
    pub bounds: BoundPair,
}

impl Default for IidDesign {
    fn default() -> Self {
        Self {
            outcome: OutcomeParams::default(),
            beta_t: 0.8,
            z_intercept: 0.0,
            z_slope: 0.8,
            bounds: BoundPair {
                b_minus: 0.5,
                b_plus: 2.0,
            },
        }
    }
}

/// Rows of an [`IidDesign`] draw.
#[derive(Debug, Clone, PartialEq)]
pub struct IidSample {
    pub x: Vec<f64>,
    pub t: Vec<u8>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

impl IidDesign {
    pub fn pi_t(&self, t: u8, x: f64) -> f64 {
        let p = true_propensity(&[x], &[self.beta_t]);
        if t == 1 {
            p
        } else {
            1.0 - p
        }
    }

    pub fn pi_z(&self, z: f64, x: f64) -> f64 {
        let p = 1.0 / (1.0 + (-(self.z_intercept + self.z_slope * x)).exp());
        if z > 0.5 {
            p
        } else {
            1.0 - p
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<IidSample> {
        let x: Vec<f64> = sample_covariates(n, 1, child_seed(seed, 0))?.rows().map(|r| r[0]).collect();
        let mut r = seeded(child_seed(seed, 1));
        let mut t = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for &xi in &x {
            let ti = u8::from(r.random::<f64>() < self.pi_t(1, xi));
            let zi = f64::from(u8::from(r.random::<f64>() < self.pi_z(1.0, xi)));
            let e: f64 = StandardNormal.sample(&mut r);
            t.push(ti);
            z.push(zi);
            y.push(outcome_mean(&self.outcome, ti, zi, &[xi]) + self.outcome.noise_sd * e);
        }
        Ok(IidSample { x, t, z, y })
    }

    /// True nuisances of a row for `target`, with the observed exposure `z_obs`.
    pub fn true_row(&self, x: f64, z_obs: f64, target: Target) -> RowNuisance {
        let b = self.bounds;
        let a = alpha_levels(b);
        let m = outcome_mean(&self.outcome, target.t, target.z, &[x]);
        let sd = self.outcome.noise_sd;
        let n = Normal::new(0.0, 1.0).expect("standard normal");
        let at = |alpha: f64| {
            let c = n.inverse_cdf(alpha);
            let pdf = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let gu = sd * (pdf - c * (1.0 - n.cdf(c)));
            let gl = sd * (pdf + c * n.cdf(c));
            (m + sd * c, gu, gl)
        };
        let (q_plus, gu_plus, gl_plus) = at(a.alpha_plus);
        let (q_minus, gu_minus, gl_minus) = at(a.alpha_minus);
        RowNuisance {
            fold: 0,
            pi_t: self.pi_t(target.t, x),
            pi_g: self.pi_z(target.z, x),
            bounds: b,
            q_plus,
            q_minus,
            gu_plus,
            gl_plus,
            gu_minus,
            gl_minus,
            omega: f64::from(u8::from((z_obs - target.z).abs() < 1e-9)),
        }
    }

    /// Population APO bounds `(lo, hi)`: the mean surface averaged over `X`
    /// plus the Gaussian sharp-bound shifts from the oracle.
    pub fn apo_bounds(&self, target: Target) -> (f64, f64) {
        let p = &self.outcome;
        let t = f64::from(target.t);
        let mean = p.tau * t + p.delta * target.z + p.gamma * t * target.z + F_SCALAR_MEAN;
        let (lo, hi) = NormalMixture::single(0.0, p.noise_sd).sharp_bounds(self.bounds.b_minus, self.bounds.b_plus);
        (mean + lo, mean + hi)
    }
}

/// Mean of the upper pseudo-outcome with true nuisances and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnbiasedCheck {
    pub mean: f64,
    pub se: f64,
    pub truth: f64,
}

impl UnbiasedCheck {
    pub fn z_score(&self) -> f64 {
        (self.mean - self.truth) / self.se
    }
}

pub fn unbiasedness(design: &IidDesign, n: usize, seed: u64, target: Target, sign: Sign) -> Result<UnbiasedCheck> {
    let s = design.sample(n, seed)?;
    let phi: Vec<f64> = (0..n)
        .map(|i| {
            let row = design.true_row(s.x[i], s.z[i], target);
            pseudo_outcome(sign, s.y[i], s.t[i], target.t, &row)
        })
        .collect();
    let (mean, var) = mean_var(&phi);
    let (lo, hi) = design.apo_bounds(target);
    Ok(UnbiasedCheck {
        mean,
        se: (var / n as f64).sqrt(),
        truth: if sign == Sign::Upper { hi } else { lo },
    })
}

/// Which nuisance block is perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    /// Shifts the upper cutoff by `delta`; tail moments follow the new cutoff.
    Quantile,
    /// Inflates the exposure propensity by `1 + delta` and shifts both tail moments by `delta`.
    PropensityAndTails,
    /// Inflates the exposure propensity only.
    Propensity,
}

/// Mean bias of the upper APO bound per `delta`, using common random numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub deltas: Vec<f64>,
    pub bias: Vec<f64>,
    /// Least-squares slope of `log|bias|` on `log delta`.
    pub slope: f64,
}

fn perturbed_row(design: &IidDesign, row: &RowNuisance, x: f64, kind: Perturbation, delta: f64) -> RowNuisance {
    let mut r = *row;
    match kind {
        Perturbation::Quantile => {
            // exact tails at the shifted cutoff
            let q = row.q_plus + delta;
            let m = outcome_mean(&design.outcome, 1, 1.0, &[x]);
            let sd = design.outcome.noise_sd;
            let n = Normal::new(0.0, 1.0).expect("standard normal");
            let c = (q - m) / sd;
            let pdf = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
            r.q_plus = q;
            r.gu_plus = sd * (pdf - c * (1.0 - n.cdf(c)));
            r.gl_plus = sd * (pdf + c * n.cdf(c));
        }
        Perturbation::PropensityAndTails => {
            r.pi_g = row.pi_g * (1.0 + delta);
            r.gu_plus = row.gu_plus + delta;
            r.gl_plus = row.gl_plus + delta;
        }
        Perturbation::Propensity => {
            r.pi_g = row.pi_g * (1.0 + delta);
        }
    }
    r
}

/// Bias of the upper APO bound at target `(1, 1)` under injected nuisance errors.
pub fn orthogonality_probe(
    design: &IidDesign,
    kind: Perturbation,
    deltas: &[f64],
    seeds: usize,
    n: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if deltas.iter().any(|d| *d <= 0.0) {
        bail!("perturbation sizes must be positive");
    }
    let target = Target { t: 1, z: 1.0 };
    let per_seed: Vec<Vec<f64>> = (0..seeds)
        .into_par_iter()
        .map(|s| -> Result<Vec<f64>> {
            let smp = design.sample(n, child_seed(seed, s as u64))?;
            let mut sums = vec![0.0; deltas.len()];
            for i in 0..n {
                let row = design.true_row(smp.x[i], smp.z[i], target);
                let base = pseudo_outcome(Sign::Upper, smp.y[i], smp.t[i], 1, &row);
                for (k, &d) in deltas.iter().enumerate() {
                    let pr = perturbed_row(design, &row, smp.x[i], kind, d);
                    sums[k] += pseudo_outcome(Sign::Upper, smp.y[i], smp.t[i], 1, &pr) - base;
                }
            }
            Ok(sums.into_iter().map(|v| v / n as f64).collect())
        })
        .collect::<Result<_>>()?;
    let bias: Vec<f64> = (0..deltas.len())
        .map(|k| per_seed.iter().map(|v| v[k]).sum::<f64>() / seeds as f64)
        .collect();
    let lx: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
    let ly: Vec<f64> = bias.iter().map(|b| b.abs().max(1e-300).ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(ProbeResult {
        deltas: deltas.to_vec(),
        bias,
        slope: sxy / sxx,
    })
}

/// Kernel-localized upper APO bound for a continuous exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStudy {
    pub truth: f64,
    pub bandwidths: Vec<f64>,
    /// `estimates[seed][bandwidth]`.
    pub estimates: Vec<Vec<f64>>,
}

impl KernelStudy {
    /// Share of seeds whose error at the last bandwidth is below the error at the first.
    pub fn improvement_share(&self) -> f64 {
        let last = self.bandwidths.len() - 1;
        let better = self
            .estimates
            .iter()
            .filter(|e| (e[last] - self.truth).abs() < (e[0] - self.truth).abs())
            .count();
        better as f64 / self.estimates.len() as f64
    }
}

/// Exposure level where `sin(freq z)` has its largest curvature.
pub fn kernel_target(design: &ContinuousDesign) -> f64 {
    std::f64::consts::FRAC_PI_2 / design.freq
}

/// Analytic upper APO bound of the continuous design at `(t, z)` under constant bounds.
pub fn continuous_apo_upper(design: &ContinuousDesign, t: u8, z: f64, b: BoundPair) -> f64 {
    let mean = design.tau * f64::from(t) + design.amp * (design.freq * z).sin() + F_SCALAR_MEAN;
    let (_, hi) = NormalMixture::single(0.0, design.noise_sd).sharp_bounds(b.b_minus, b.b_plus);
    mean + hi
}

pub fn kernel_consistency(
    design: &ContinuousDesign,
    bandwidths: &[f64],
    seeds: usize,
    n: usize,
    seed: u64,
) -> Result<KernelStudy> {
    let b = BoundPair {
        b_minus: 0.5,
        b_plus: 2.0,
    };
    let model = MisspecModel::new(
        MisspecKind::Msm {
            gamma_minus: b.b_minus,
            gamma_plus: b.b_plus,
            table: None,
        },
        1.0,
    )?;
    let z = kernel_target(design);
    let target = Target { t: 1, z };
    let estimates: Vec<Vec<f64>> = (0..seeds)
        .into_par_iter()
        .map(|s| -> Result<Vec<f64>> {
            let data = design.sample(n, child_seed(seed, s as u64))?;
            bandwidths
                .iter()
                .map(|&h| {
                    let cfg = CrossfitConfig {
                        seed: child_seed(seed, 1000 + s as u64),
                        localization: Localization::Kernel(KernelSpec::new(KernelShape::Epanechnikov, h)?),
                        exposure_mode: ExposureMode::Direct,
                        exposure: LearnerSpec::poly(3),
                        ..CrossfitConfig::default()
                    };
                    let input = CrossfitData {
                        x: &data.x,
                        t: &data.t,
                        z: &data.z_assumed.values,
                        y: &data.y,
                        network: None,
                    };
                    let (est, _) = estimate_all(input, std::slice::from_ref(&model), &[target], &cfg, None)?;
                    Ok(est[0].apo.hi)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(KernelStudy {
        truth: continuous_apo_upper(design, 1, z, b),
        bandwidths: bandwidths.to_vec(),
        estimates,
    })
}

/// Largest gap between analytic exposure probabilities and exhaustive
/// enumeration over all nodes of degree at most `max_degree`.
pub fn exposure_exactness(graphs: usize, n: usize, p: f64, max_degree: usize, seed: u64) -> Result<(f64, usize)> {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for k in 0..graphs {
        let g = gen_erdos_renyi(n, p, child_seed(seed, k as u64))?.without_isolates().0;
        let x = sample_covariates(g.node_count(), 1, child_seed(seed, 100 + k as u64))?;
        let prop = FnPredictor(|r: &[f64]| true_propensity(r, &[1.2]));
        let unit: Vec<f64> = x.rows().map(|r| true_propensity(r, &[1.2])).collect();
        for spec in [ExposureSpec::Mean, ExposureSpec::Threshold { c: 0.5 }, ExposureSpec::Threshold { c: 0.3 }] {
            let pmfs = analytic_count_pmfs(&g, &spec, &x, &prop)?;
            for i in 0..g.node_count() {
                if g.degree(i) > max_degree {
                    continue;
                }
                checked += 1;
                for (z, prob) in enumerate_exposure_distribution(&g, i, &unit, &spec)? {
                    let analytic = analytic_exposure_prob(&spec, &pmfs[i], z)?.unwrap_or(f64::NAN);
                    worst = worst.max((analytic - prob).abs());
                    if analytic.is_nan() {
                        worst = f64::INFINITY;
                    }
                }
            }
        }
    }
    Ok((worst, checked))
}
