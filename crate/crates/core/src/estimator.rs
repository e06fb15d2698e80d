//! Closed-form sharp bounds, orthogonal pseudo-outcomes and the cross-fitted
//! two-stage bound estimators.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dgp::{Covariates, EffectKind};
use crate::error::{Error, Result};
use crate::exposure::GRID_TOL;
use crate::learners::{
    crossfit_nuisances, CrossfitConfig, CrossfitData, LearnerSpec, Predictor, RowNuisance, Target,
    TargetNuisances,
};
use crate::sensitivity::{BoundPair, MisspecModel};

/// Normal quantile used for 95% intervals.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelShape {
    Epanechnikov,
    Gaussian,
    Box,
}

/// Smoothing kernel `K_h(u) = K(u / h) / h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub shape: KernelShape,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(shape: KernelShape, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::param(format!("bandwidth {bandwidth} must be positive")));
        }
        Ok(Self { shape, bandwidth })
    }

    /// Unscaled kernel `K(u)`.
    pub fn unit(&self, u: f64) -> f64 {
        match self.shape {
            KernelShape::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            KernelShape::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            KernelShape::Box => {
                if u.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
        }
    }

    pub fn scaled(&self, u: f64) -> f64 {
        self.unit(u / self.bandwidth) / self.bandwidth
    }
}

/// Exact matching for discrete exposures, kernel weights for continuous ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Localization {
    Discrete,
    Kernel(KernelSpec),
}

impl Localization {
    pub fn weight(&self, z_obs: f64, z_target: f64) -> f64 {
        localization_weight(self, z_obs, z_target)
    }
}

/// `1[z_obs = z_target]` or `K_h(z_obs - z_target)`.
pub fn localization_weight(mode: &Localization, z_obs: f64, z_target: f64) -> f64 {
    match mode {
        Localization::Discrete => {
            if (z_obs - z_target).abs() < GRID_TOL {
                1.0
            } else {
                0.0
            }
        }
        Localization::Kernel(k) => k.scaled(z_obs - z_target),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Upper,
    Lower,
}

/// Sharp CAPO bound from the cutoff and tail moments:
/// upper `q + gu / b- - gl / b+`, lower `q + gu / b+ - gl / b-`.
pub fn capo_closed_form(sign: Sign, q: f64, gu: f64, gl: f64, b: BoundPair) -> f64 {
    match sign {
        Sign::Upper => q + gu / b.b_minus - gl / b.b_plus,
        Sign::Lower => q + gu / b.b_plus - gl / b.b_minus,
    }
}

/// Orthogonal pseudo-outcome of one row for target treatment `t`.
pub fn pseudo_outcome(sign: Sign, y: f64, t_obs: u8, t: u8, row: &RowNuisance) -> f64 {
    let b = row.bounds;
    let (q, gu, gl, w_up, w_low) = match sign {
        Sign::Upper => (row.q_plus, row.gu_plus, row.gl_plus, b.b_minus, b.b_plus),
        Sign::Lower => (row.q_minus, row.gu_minus, row.gl_minus, b.b_plus, b.b_minus),
    };
    let plug = capo_closed_form(sign, q, gu, gl, b);
    if t_obs != t || row.omega == 0.0 {
        return plug;
    }
    let kappa = row.omega / (row.pi_t * row.pi_g);
    let h = ((y - q).max(0.0) - gu) / w_up - ((q - y).max(0.0) - gl) / w_low;
    plug + kappa * h
}

/// Plug-in bound of one row (no correction term).
pub fn plugin_value(sign: Sign, row: &RowNuisance) -> f64 {
    match sign {
        Sign::Upper => capo_closed_form(sign, row.q_plus, row.gu_plus, row.gl_plus, row.bounds),
        Sign::Lower => capo_closed_form(sign, row.q_minus, row.gu_minus, row.gl_minus, row.bounds),
    }
}

/// Pseudo-outcomes over the rows where the target is attainable.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOutcomes {
    pub target: Target,
    pub rows: Vec<usize>,
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
    /// Rows where `1/b+ < pi_g`, so the bound may not be sharp for discrete outcomes.
    pub sharpness_flags: usize,
}

pub fn compute_pseudo_outcomes(y: &[f64], t: &[u8], nuis: &TargetNuisances) -> Result<PseudoOutcomes> {
    let mut out = PseudoOutcomes {
        target: nuis.target,
        rows: Vec::new(),
        plus: Vec::new(),
        minus: Vec::new(),
        sharpness_flags: 0,
    };
    for (i, r) in nuis.rows.iter().enumerate() {
        let Some(r) = r else { continue };
        let p = pseudo_outcome(Sign::Upper, y[i], t[i], nuis.target.t, r);
        let m = pseudo_outcome(Sign::Lower, y[i], t[i], nuis.target.t, r);
        if !p.is_finite() || !m.is_finite() {
            return Err(Error::Numeric { row: i, what: "pseudo-outcome" });
        }
        if 1.0 / r.bounds.b_plus < r.pi_g {
            out.sharpness_flags += 1;
        }
        out.rows.push(i);
        out.plus.push(p);
        out.minus.push(m);
    }
    if out.rows.is_empty() {
        return Err(Error::Positivity(format!(
            "no row can attain exposure {} ",
            nuis.target.z
        )));
    }
    Ok(out)
}

/// Neumaier-compensated mean and sample variance.
pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = compensated_sum(v.iter().copied()) / n;
    let var = if v.len() > 1 {
        compensated_sum(v.iter().map(|a| (a - mean) * (a - mean))) / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

fn compensated_sum(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in it {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

/// APO bound estimates with variances and 95% intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApoBounds {
    pub lo: f64,
    pub hi: f64,
    pub var_lo: f64,
    pub var_hi: f64,
    /// Interval for the lower bound.
    pub ci_lo: [f64; 2],
    /// Interval for the upper bound.
    pub ci_hi: [f64; 2],
    pub n: usize,
}

impl ApoBounds {
    /// `[ci_lo[0], ci_hi[1]]`: the identified set widened by sampling error.
    pub fn outer(&self) -> (f64, f64) {
        (self.ci_lo[0], self.ci_hi[1])
    }
}

pub fn estimate_apo_bounds(plus: &[f64], minus: &[f64]) -> Result<ApoBounds> {
    if plus.is_empty() || plus.len() != minus.len() {
        return Err(Error::param("pseudo-outcome vectors must be nonempty and aligned"));
    }
    let n = plus.len();
    let (mut hi, var_hi) = mean_var(plus);
    let (mut lo, var_lo) = mean_var(minus);
    if lo > hi {
        std::mem::swap(&mut lo, &mut hi);
    }
    let se = |v: f64| Z95 * (v / n as f64).sqrt();
    Ok(ApoBounds {
        lo,
        hi,
        var_lo,
        var_hi,
        ci_lo: [lo - se(var_lo), lo + se(var_lo)],
        ci_hi: [hi - se(var_hi), hi + se(var_hi)],
        n,
    })
}

/// Second-stage CAPO bound regressions.
#[derive(Clone)]
pub struct CapoFit {
    pub upper: Arc<dyn Predictor>,
    pub lower: Arc<dyn Predictor>,
}

impl CapoFit {
    /// `(lo, hi)` at `x`, swapped if the fits cross. The flag reports a swap.
    pub fn eval(&self, x: &[f64]) -> (f64, f64, bool) {
        let (lo, hi) = (self.lower.predict(x), self.upper.predict(x));
        if lo > hi {
            (hi, lo, true)
        } else {
            (lo, hi, false)
        }
    }
}

pub fn estimate_capo_bounds(x: &Covariates, p: &PseudoOutcomes, spec: &LearnerSpec) -> Result<CapoFit> {
    let xs = x.select(&p.rows);
    let w = vec![1.0; p.rows.len()];
    Ok(CapoFit {
        upper: spec.fit_regression(&xs, &p.plus, &w, 30)?,
        lower: spec.fit_regression(&xs, &p.minus, &w, 31)?,
    })
}

/// Plug-in APO bounds: averages of the closed form at fitted nuisances.
pub fn plugin_estimate(nuis: &TargetNuisances) -> Result<ApoBounds> {
    let rows: Vec<&RowNuisance> = nuis.rows.iter().flatten().collect();
    let plus: Vec<f64> = rows.iter().map(|r| plugin_value(Sign::Upper, r)).collect();
    let minus: Vec<f64> = rows.iter().map(|r| plugin_value(Sign::Lower, r)).collect();
    estimate_apo_bounds(&plus, &minus)
}

/// Effect interval with intervals for both endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectBound {
    pub kind: EffectKind,
    pub a: Target,
    pub b: Target,
    pub lo: f64,
    pub hi: f64,
    pub ci_lo: [f64; 2],
    pub ci_hi: [f64; 2],
    pub n: usize,
}

/// Average effect bounds `[f-(a) - f+(b), f+(a) - f-(b)]` from differenced
/// pseudo-outcomes over the rows where both targets are attainable.
pub fn effect_bounds(kind: EffectKind, a: &PseudoOutcomes, b: &PseudoOutcomes) -> Result<EffectBound> {
    kind.validate((a.target.t, a.target.z), (b.target.t, b.target.z))?;
    let (mut plus, mut minus) = (Vec::new(), Vec::new());
    let (mut i, mut j) = (0, 0);
    while i < a.rows.len() && j < b.rows.len() {
        match a.rows[i].cmp(&b.rows[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                plus.push(a.plus[i] - b.minus[j]);
                minus.push(a.minus[i] - b.plus[j]);
                i += 1;
                j += 1;
            }
        }
    }
    if plus.is_empty() {
        return Err(Error::Argument("the two targets share no eligible rows".into()));
    }
    let apo = estimate_apo_bounds(&plus, &minus)?;
    Ok(EffectBound {
        kind,
        a: a.target,
        b: b.target,
        lo: apo.lo,
        hi: apo.hi,
        ci_lo: apo.ci_lo,
        ci_hi: apo.ci_hi,
        n: apo.n,
    })
}

/// Individual effect bounds at `x` from two CAPO fits.
pub fn individual_effect_bounds(a: &CapoFit, b: &CapoFit, x: &[f64]) -> (f64, f64) {
    let (alo, ahi, _) = a.eval(x);
    let (blo, bhi, _) = b.eval(x);
    (alo - bhi, ahi - blo)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapoPoint {
    pub x: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Serializable estimate for one (model, target) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub target: Target,
    pub model: String,
    pub factor: f64,
    pub apo: ApoBounds,
    pub plugin: ApoBounds,
    pub effects: Vec<EffectBound>,
    /// CAPO bounds along the first covariate (other coordinates at zero).
    pub capo_grid: Vec<CapoPoint>,
    pub eligible_share: f64,
    pub crossing_repairs: usize,
    pub sharpness_flags: usize,
    pub clip: f64,
}

impl BoundResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bound results serialize")
    }
}

/// Everything estimated for one (model, target) pair.
#[derive(Clone)]
pub struct TargetEstimate {
    pub model: usize,
    pub pseudo: PseudoOutcomes,
    pub apo: ApoBounds,
    pub plugin: ApoBounds,
    pub capo: Option<CapoFit>,
    pub eligible_share: f64,
}

/// Runs cross-fitting, pseudo-outcomes, APO and (optionally) CAPO estimation
/// for every model and target. Results are indexed `model * targets.len() + target`.
pub fn estimate_all(
    data: CrossfitData<'_>,
    models: &[MisspecModel],
    targets: &[Target],
    cfg: &CrossfitConfig,
    second_stage: Option<&LearnerSpec>,
) -> Result<(Vec<TargetEstimate>, f64)> {
    let fit = crossfit_nuisances(data, models, targets, cfg)?;
    let out = fit
        .nuisances
        .iter()
        .map(|nuis| {
            let pseudo = compute_pseudo_outcomes(data.y, data.t, nuis)?;
            let apo = estimate_apo_bounds(&pseudo.plus, &pseudo.minus)?;
            let plugin = plugin_estimate(nuis)?;
            let capo = second_stage
                .map(|spec| estimate_capo_bounds(data.x, &pseudo, spec))
                .transpose()?;
            Ok(TargetEstimate {
                model: nuis.model,
                pseudo,
                apo,
                plugin,
                capo,
                eligible_share: nuis.eligible_share(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, fit.clipped_share))
}

/// Builds the serializable result of one target estimate.
pub fn bound_result(
    est: &TargetEstimate,
    model: &MisspecModel,
    effects: Vec<EffectBound>,
    grid: &[Vec<f64>],
    clip: f64,
) -> BoundResult {
    let mut crossing_repairs = 0;
    let capo_grid = match &est.capo {
        Some(fit) => grid
            .iter()
            .map(|x| {
                let (lo, hi, swapped) = fit.eval(x);
                crossing_repairs += usize::from(swapped);
                CapoPoint { x: x[0], lo, hi }
            })
            .collect(),
        None => Vec::new(),
    };
    BoundResult {
        target: est.pseudo.target,
        model: model.name().to_string(),
        factor: model.factor,
        apo: est.apo,
        plugin: est.plugin,
        effects,
        capo_grid,
        eligible_share: est.eligible_share,
        crossing_repairs,
        sharpness_flags: est.pseudo.sharpness_flags,
        clip,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::Constant;
    use crate::rng;
    use crate::sensitivity::alpha_levels;
    use rand::Rng as _;

    fn row(b: BoundPair) -> RowNuisance {
        RowNuisance {
            fold: 0,
            pi_t: 0.4,
            pi_g: 0.3,
            bounds: b,
            q_plus: 0.7,
            q_minus: 0.2,
            gu_plus: 0.1,
            gl_plus: 0.3,
            gu_minus: 0.25,
            gl_minus: 0.05,
            omega: 1.0,
        }
    }

    #[test]
    fn closed_form_collapses_to_mean_at_unit_bounds() {
        // y uniform on [0, 1], any cutoff q: q + E(y-q)+ - E(q-y)+ = 1/2
        for q in [0.1, 0.5, 0.9] {
            let gu = (1.0 - q) * (1.0 - q) / 2.0;
            let gl = q * q / 2.0;
            for s in [Sign::Upper, Sign::Lower] {
                let v = capo_closed_form(s, q, gu, gl, BoundPair::IDENTITY);
                assert!((v - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn closed_form_uniform_example() {
        let b = BoundPair {
            b_minus: 0.5,
            b_plus: 2.0,
        };
        let v = capo_closed_form(Sign::Upper, 2.0 / 3.0, 1.0 / 18.0, 2.0 / 9.0, b);
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        // lower bound: level 1/3, cutoff 1/3, gu = (2/3)^2/2, gl = (1/3)^2/2
        let v = capo_closed_form(Sign::Lower, 1.0 / 3.0, 2.0 / 9.0, 1.0 / 18.0, b);
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_outcome_with_reciprocal_bounds() {
        // y ~ uniform on [-1, 1]; reciprocal bounds give mirrored levels
        let g = 3.0;
        let b = BoundPair {
            b_minus: 1.0 / g,
            b_plus: g,
        };
        let a = alpha_levels(b);
        let q_at = |alpha: f64| 2.0 * alpha - 1.0;
        let gu = |q: f64| (1.0 - q) * (1.0 - q) / 4.0;
        let gl = |q: f64| (q + 1.0) * (q + 1.0) / 4.0;
        let (qp, qm) = (q_at(a.alpha_plus), q_at(a.alpha_minus));
        let up = capo_closed_form(Sign::Upper, qp, gu(qp), gl(qp), b);
        let lo = capo_closed_form(Sign::Lower, qm, gu(qm), gl(qm), b);
        assert!((up + lo).abs() < 1e-12);
        assert!(up > 0.0);
    }

    #[test]
    fn pseudo_outcome_without_treatment_match_is_plugin() {
        let r = row(BoundPair {
            b_minus: 0.5,
            b_plus: 2.0,
        });
        let v = pseudo_outcome(Sign::Upper, 3.0, 0, 1, &r);
        assert_eq!(v, plugin_value(Sign::Upper, &r));
        let v = pseudo_outcome(Sign::Lower, 3.0, 0, 1, &r);
        assert_eq!(v, plugin_value(Sign::Lower, &r));
    }

    #[test]
    fn pseudo_outcome_reduces_to_aipw_at_unit_bounds() {
        let mut r = rng::seeded(1);
        for _ in 0..1000 {
            let mut nu = row(BoundPair::IDENTITY);
            nu.q_plus = r.random_range(-2.0..2.0);
            nu.gu_plus = r.random_range(0.0..1.0);
            nu.gl_plus = r.random_range(0.0..1.0);
            nu.pi_t = r.random_range(0.05..0.95);
            nu.pi_g = r.random_range(0.05..1.0);
            let y = r.random_range(-3.0..3.0);
            let m = nu.q_plus + nu.gu_plus - nu.gl_plus;
            let aipw = m + (y - m) / (nu.pi_t * nu.pi_g);
            let v = pseudo_outcome(Sign::Upper, y, 1, 1, &nu);
            assert!((v - aipw).abs() < 1e-10);
        }
    }

    #[test]
    fn kernel_weights() {
        assert_eq!(localization_weight(&Localization::Discrete, 0.5, 0.5), 1.0);
        assert_eq!(localization_weight(&Localization::Discrete, 0.5, 0.25), 0.0);
        let k = KernelSpec::new(KernelShape::Epanechnikov, 0.1).unwrap();
        assert!((localization_weight(&Localization::Kernel(k), 0.3, 0.3) - 7.5).abs() < 1e-12);
        for shape in [KernelShape::Epanechnikov, KernelShape::Gaussian, KernelShape::Box] {
            let k = Localization::Kernel(KernelSpec::new(shape, 0.07).unwrap());
            let step = 1e-4;
            let total: f64 = (-20_000..20_000)
                .map(|i| k.weight(0.2 + i as f64 * step, 0.2) * step)
                .sum();
            assert!((total - 1.0).abs() < 1e-3, "{shape:?} {total}");
        }
        assert!(KernelSpec::new(KernelShape::Box, 0.0).is_err());
    }

    #[test]
    fn constant_pseudo_outcomes_give_point_interval() {
        let v = vec![1.25; 50];
        let a = estimate_apo_bounds(&v, &v).unwrap();
        assert_eq!((a.lo, a.hi), (1.25, 1.25));
        assert_eq!(a.ci_lo, [1.25, 1.25]);
        assert_eq!(a.ci_hi, [1.25, 1.25]);
        assert!(estimate_apo_bounds(&[], &[]).is_err());
    }

    #[test]
    fn capo_fit_of_constant_and_crossing_repair() {
        let x = crate::dgp::sample_covariates(100, 1, 1).unwrap();
        let p = PseudoOutcomes {
            target: Target { t: 1, z: 0.5 },
            rows: (0..100).collect(),
            plus: vec![2.0; 100],
            minus: vec![2.0; 100],
            sharpness_flags: 0,
        };
        let fit = estimate_capo_bounds(&x, &p, &LearnerSpec::poly(3)).unwrap();
        let (lo, hi, _) = fit.eval(&[0.3]);
        assert!((lo - 2.0).abs() < 1e-9 && (hi - 2.0).abs() < 1e-9);
        let crossed = CapoFit {
            upper: Arc::new(Constant(0.0)),
            lower: Arc::new(Constant(1.0)),
        };
        for i in 0..100 {
            let (lo, hi, swapped) = crossed.eval(&[-1.0 + 0.02 * i as f64]);
            assert!(lo <= hi && swapped);
        }
    }

    #[test]
    fn effect_arguments_are_checked() {
        let mk = |t, z| PseudoOutcomes {
            target: Target { t, z },
            rows: vec![0, 1, 2],
            plus: vec![1.0, 1.0, 1.0],
            minus: vec![0.0, 0.0, 0.0],
            sharpness_flags: 0,
        };
        assert!(effect_bounds(EffectKind::Direct, &mk(1, 0.5), &mk(0, 0.0)).is_err());
        let e = effect_bounds(EffectKind::Direct, &mk(1, 0.5), &mk(0, 0.5)).unwrap();
        assert_eq!((e.lo, e.hi), (-1.0, 1.0));
    }
}
