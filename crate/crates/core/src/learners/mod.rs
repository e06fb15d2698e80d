//! Nuisance learners and K-fold cross-fitting.
//!
//! Every row's nuisance values come from models trained without the row's
//! fold. Models are exposed through the [`Predictor`] trait so that known
//! functions can stand in for fitted ones.

pub mod density;
pub mod gbdt;
pub mod linear;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::Covariates;
use crate::error::{Error, Result};
use crate::estimator::Localization;
use crate::exposure::{exposure_pool, grid_count, ExposureSpec, GRID_TOL};
use crate::netgraph::Graph;
use crate::rng;
use crate::sensitivity::{alpha_levels, poisson_binomial_pmf, BoundPair, MisspecModel};

use density::ConditionalDensity;
use gbdt::{fit_gbdt, weighted_pinball_minimizer, BoostParams, Loss};
use linear::{fit_additive_poly, fit_binned};

/// A fitted function of a feature row.
pub trait Predictor: Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;
}

/// A constant function.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl Predictor for Constant {
    fn predict(&self, _: &[f64]) -> f64 {
        self.0
    }
}

/// A closure as a predictor, e.g. a known true nuisance.
pub struct FnPredictor<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Send + Sync> Predictor for FnPredictor<F> {
    fn predict(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// Clamps another predictor into `[lo, hi]`.
pub struct Clamped {
    pub inner: Arc<dyn Predictor>,
    pub lo: f64,
    pub hi: f64,
}

impl Predictor for Clamped {
    fn predict(&self, x: &[f64]) -> f64 {
        self.inner.predict(x).clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    /// Histogram gradient-boosted trees.
    Gbdt,
    /// Equal-frequency bins of the first feature.
    Binned,
    /// Additive polynomial least squares (regression only).
    Poly,
    /// Weighted global mean or quantile.
    Mean,
}

/// Learner configuration block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub depth: usize,
    pub trees: usize,
    pub learning_rate: f64,
    pub bins: usize,
    pub min_leaf: usize,
    pub subsample: f64,
    pub degree: usize,
    pub seed: u64,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        let b = BoostParams::default();
        Self {
            kind: LearnerKind::Gbdt,
            depth: b.depth,
            trees: b.trees,
            learning_rate: b.learning_rate,
            bins: b.bins,
            min_leaf: b.min_leaf,
            subsample: b.subsample,
            degree: 3,
            seed: 0,
        }
    }
}

impl LearnerSpec {
    pub fn poly(degree: usize) -> Self {
        Self {
            kind: LearnerKind::Poly,
            degree,
            ..Self::default()
        }
    }

    fn boost(&self, seed_offset: u64) -> BoostParams {
        BoostParams {
            trees: self.trees,
            depth: self.depth,
            learning_rate: self.learning_rate,
            bins: self.bins,
            min_leaf: self.min_leaf,
            subsample: self.subsample,
            l2: 1.0,
            seed: rng::child_seed(self.seed, seed_offset),
        }
    }

    /// Weighted least-squares regression.
    pub fn fit_regression(&self, x: &Covariates, y: &[f64], w: &[f64], salt: u64) -> Result<Arc<dyn Predictor>> {
        check_rows(x, y, w)?;
        Ok(match self.kind {
            LearnerKind::Gbdt => Arc::new(fit_gbdt(x, y, w, &Loss::Squared, &self.boost(salt))?),
            LearnerKind::Binned => Arc::new(fit_binned(x, y, w, self.bins)?),
            LearnerKind::Poly => Arc::new(fit_additive_poly(x, y, w, self.degree, 1e-8)?),
            LearnerKind::Mean => {
                let ws: f64 = w.iter().sum();
                Arc::new(Constant(y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / ws))
            }
        })
    }

    /// Probability of `y = 1`.
    pub fn fit_classifier(&self, x: &Covariates, y: &[f64], w: &[f64], salt: u64) -> Result<Arc<dyn Predictor>> {
        check_rows(x, y, w)?;
        let ws: f64 = w.iter().sum();
        let share = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / ws;
        if share <= 0.0 || share >= 1.0 {
            return Err(Error::DegenerateFit("single-class training data".into()));
        }
        Ok(match self.kind {
            LearnerKind::Gbdt => Arc::new(fit_gbdt(x, y, w, &Loss::Logistic, &self.boost(salt))?),
            LearnerKind::Mean => Arc::new(Constant(share)),
            LearnerKind::Binned | LearnerKind::Poly => Arc::new(Clamped {
                inner: self.fit_regression(x, y, w, salt)?,
                lo: 0.0,
                hi: 1.0,
            }),
        })
    }

    /// Minimizes the weighted check loss with one level per row.
    pub fn fit_quantile(
        &self,
        x: &Covariates,
        y: &[f64],
        w: &[f64],
        levels: &[f64],
        salt: u64,
    ) -> Result<Arc<dyn Predictor>> {
        check_rows(x, y, w)?;
        if levels.len() != y.len() || levels.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::param("quantile levels must lie in (0, 1), one per row"));
        }
        Ok(match self.kind {
            LearnerKind::Gbdt => Arc::new(fit_gbdt(
                x,
                y,
                w,
                &Loss::Pinball(levels.to_vec()),
                &self.boost(salt),
            )?),
            LearnerKind::Mean => Arc::new(Constant(weighted_pinball_minimizer(y, w, levels))),
            LearnerKind::Binned | LearnerKind::Poly => {
                return Err(Error::param(format!(
                    "{:?} learners do not support quantile loss",
                    self.kind
                )))
            }
        })
    }
}

fn check_rows(x: &Covariates, y: &[f64], w: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Positivity("empty training subset".into()));
    }
    if y.len() != x.len() || w.len() != x.len() {
        return Err(Error::param("feature, target and weight lengths differ"));
    }
    if !(w.iter().sum::<f64>() > 0.0) {
        return Err(Error::Positivity("training weights sum to zero".into()));
    }
    Ok(())
}

/// Balanced random assignment of rows to folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub assignments: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }
}

pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > n {
        return Err(Error::param(format!("need 2 <= K <= n, got K={k}, n={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut assignments = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = pos % k;
    }
    Ok(FoldPlan { assignments, k, seed })
}

/// Unit propensity `P(T = 1 | x)` clipped to `[clip, 1 - clip]`.
pub fn fit_unit_propensity(x: &Covariates, t: &[u8], spec: &LearnerSpec, clip: f64) -> Result<Arc<dyn Predictor>> {
    let y: Vec<f64> = t.iter().map(|&v| f64::from(v)).collect();
    let inner = spec.fit_classifier(x, &y, &vec![1.0; y.len()], 1)?;
    Ok(Arc::new(Clamped {
        inner,
        lo: clip,
        hi: 1.0 - clip,
    }))
}

/// Weighted quantile regression at per-row levels.
pub fn fit_quantile(
    x: &Covariates,
    y: &[f64],
    w: &[f64],
    levels: &[f64],
    spec: &LearnerSpec,
) -> Result<Arc<dyn Predictor>> {
    spec.fit_quantile(x, y, w, levels, 2)
}

/// Upper and lower tail moments `E[(Y - q)+ | x]` and `E[(q - Y)+ | x]`,
/// clamped at zero.
pub fn fit_tail_moments(
    x: &Covariates,
    y: &[f64],
    w: &[f64],
    q: &[f64],
    spec: &LearnerSpec,
) -> Result<(Arc<dyn Predictor>, Arc<dyn Predictor>)> {
    let up: Vec<f64> = y.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    let low: Vec<f64> = y.iter().zip(q).map(|(a, b)| (b - a).max(0.0)).collect();
    let clamp = |inner| -> Arc<dyn Predictor> {
        Arc::new(Clamped {
            inner,
            lo: 0.0,
            hi: f64::INFINITY,
        })
    };
    Ok((
        clamp(spec.fit_regression(x, &up, w, 3)?),
        clamp(spec.fit_regression(x, &low, w, 4)?),
    ))
}

/// Treated-count distributions of every node's exposure pool under the given
/// unit propensities.
pub fn analytic_count_pmfs(
    g: &Graph,
    spec: &ExposureSpec,
    x: &Covariates,
    propensity: &dyn Predictor,
) -> Result<Vec<Vec<f64>>> {
    let p: Vec<f64> = x.rows().map(|r| propensity.predict(r)).collect();
    (0..g.node_count())
        .map(|i| {
            let pool = exposure_pool(spec, g, i)?;
            if pool.is_empty() {
                return Err(Error::IsolatedNode { node: i });
            }
            let probs: Vec<f64> = pool.iter().map(|&j| p[j]).collect();
            poisson_binomial_pmf(&probs)
        })
        .collect()
}

/// `P(g = z | x)` from a node's count distribution; `None` when `z` is not
/// attainable for the node.
pub fn analytic_exposure_prob(spec: &ExposureSpec, pmf: &[f64], z: f64) -> Result<Option<f64>> {
    let n = pmf.len() - 1;
    Ok(match spec {
        ExposureSpec::Mean | ExposureSpec::KhopMean { .. } => grid_count(z, n).map(|k| pmf[k]),
        ExposureSpec::Threshold { c } => {
            let k0 = ((n as f64 * c) - GRID_TOL).ceil().max(0.0) as usize;
            let above: f64 = pmf.iter().skip(k0).sum();
            if (z - 1.0).abs() < GRID_TOL {
                Some(above)
            } else if z.abs() < GRID_TOL {
                Some(1.0 - above)
            } else {
                None
            }
        }
        ExposureSpec::WeightedMean(_) => {
            return Err(Error::Mode(
                "weighted-mean exposures are continuous; use a direct density fit".into(),
            ))
        }
    })
}

/// How the exposure propensity is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureMode {
    /// Poisson-binomial over the neighbors' fitted unit propensities.
    #[default]
    Analytic,
    /// Classifier for `1[Z = z]` (discrete) or a conditional density (continuous).
    Direct,
}

/// Estimation target `(t, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub t: u8,
    pub z: f64,
}

/// Cross-fitting settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossfitConfig {
    pub folds: usize,
    pub seed: u64,
    /// Overlap clipping for both propensities.
    pub clip: f64,
    /// Quantile levels are clamped to `[level_clip, 1 - level_clip]`.
    pub level_clip: f64,
    pub localization: Localization,
    pub exposure_mode: ExposureMode,
    pub propensity: LearnerSpec,
    pub quantile: LearnerSpec,
    pub regression: LearnerSpec,
    pub exposure: LearnerSpec,
    /// Mixture components of the continuous exposure density.
    pub density_components: usize,
    /// Appends each row's quantile level to its features.
    pub level_feature: bool,
}

impl Default for CrossfitConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            clip: 0.01,
            level_clip: 0.005,
            localization: Localization::Discrete,
            exposure_mode: ExposureMode::Analytic,
            propensity: LearnerSpec::default(),
            quantile: LearnerSpec::default(),
            regression: LearnerSpec::default(),
            exposure: LearnerSpec::default(),
            density_components: 2,
            level_feature: true,
        }
    }
}

/// Observed data for cross-fitting. `z` is the exposure under the assumed mapping.
#[derive(Clone, Copy)]
pub struct CrossfitData<'a> {
    pub x: &'a Covariates,
    pub t: &'a [u8],
    pub z: &'a [f64],
    pub y: &'a [f64],
    /// Network and assumed mapping; required for analytic exposure
    /// propensities and for count-based misspecification models.
    pub network: Option<(&'a Graph, &'a ExposureSpec)>,
}

/// Nuisance values for one row, all evaluated at the estimation target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowNuisance {
    /// Fold whose complement trained the models.
    pub fold: usize,
    /// `P(T = t | x)`.
    pub pi_t: f64,
    /// Exposure pmf at `z` (discrete) or density at the observed exposure (continuous).
    pub pi_g: f64,
    pub bounds: BoundPair,
    pub q_plus: f64,
    pub q_minus: f64,
    pub gu_plus: f64,
    pub gl_plus: f64,
    pub gu_minus: f64,
    pub gl_minus: f64,
    /// Localization weight of the observed exposure.
    pub omega: f64,
}

/// Fitted models of one fold for one (model, target) pair.
#[derive(Clone)]
pub struct NuisanceSet {
    /// Fold whose rows were held out.
    pub held_out: usize,
    pub unit_propensity: Arc<dyn Predictor>,
    pub quantile_upper: Arc<dyn Predictor>,
    pub quantile_lower: Arc<dyn Predictor>,
    pub tail_up_upper: Arc<dyn Predictor>,
    pub tail_low_upper: Arc<dyn Predictor>,
    pub tail_up_lower: Arc<dyn Predictor>,
    pub tail_low_lower: Arc<dyn Predictor>,
}

/// Cross-fitted nuisances of one (model, target) pair.
#[derive(Clone)]
pub struct TargetNuisances {
    pub model: usize,
    pub target: Target,
    /// One entry per row; `None` where the target level is unattainable.
    pub rows: Vec<Option<RowNuisance>>,
    pub sets: Vec<NuisanceSet>,
}

impl TargetNuisances {
    pub fn eligible_share(&self) -> f64 {
        self.rows.iter().filter(|r| r.is_some()).count() as f64 / self.rows.len().max(1) as f64
    }
}

pub struct CrossfitOutput {
    pub plan: FoldPlan,
    /// Indexed by `model * targets.len() + target`.
    pub nuisances: Vec<TargetNuisances>,
    /// Share of exposure-propensity evaluations raised to the clip level.
    pub clipped_share: f64,
}

impl CrossfitOutput {
    pub fn get(&self, model: usize, target: usize, n_targets: usize) -> &TargetNuisances {
        &self.nuisances[model * n_targets + target]
    }
}

/// Per-fold exposure-propensity source.
enum ExposureFit {
    Analytic,
    Classifier(Vec<Arc<dyn Predictor>>),
    Density(ConditionalDensity),
}

struct FoldResult {
    rows: Vec<Vec<(usize, Option<RowNuisance>)>>,
    sets: Vec<NuisanceSet>,
    clipped: usize,
    evaluated: usize,
}

fn with_level(x: &Covariates, levels: &[f64], enabled: bool) -> Covariates {
    if !enabled {
        return x.clone();
    }
    let d = x.dim() + 1;
    let mut data = Vec::with_capacity(x.len() * d);
    for (row, a) in x.rows().zip(levels) {
        data.extend_from_slice(row);
        data.push(*a);
    }
    Covariates::from_flat(d, data).expect("dimension is consistent")
}

fn feature_row(x: &[f64], level: f64, enabled: bool) -> Vec<f64> {
    let mut v = x.to_vec();
    if enabled {
        v.push(level);
    }
    v
}

/// Fits all nuisances for every `(model, target)` pair with K-fold cross-fitting.
pub fn crossfit_nuisances(
    data: CrossfitData<'_>,
    models: &[MisspecModel],
    targets: &[Target],
    cfg: &CrossfitConfig,
) -> Result<CrossfitOutput> {
    let n = data.x.len();
    if data.t.len() != n || data.z.len() != n || data.y.len() != n {
        return Err(Error::param("data columns have different lengths"));
    }
    if models.is_empty() || targets.is_empty() {
        return Err(Error::param("need at least one model and one target"));
    }
    let continuous = matches!(cfg.localization, Localization::Kernel(_));
    if continuous && cfg.exposure_mode == ExposureMode::Analytic {
        return Err(Error::Mode(
            "analytic exposure propensities are pmfs; continuous localization needs a density".into(),
        ));
    }
    let needs_pmf = cfg.exposure_mode == ExposureMode::Analytic || models.iter().any(|m| m.needs_count_pmf());
    if needs_pmf && data.network.is_none() {
        return Err(Error::param("count distributions need the network and assumed mapping"));
    }
    let plan = make_folds(n, cfg.folds, cfg.seed)?;
    let folds: Vec<FoldResult> = (0..cfg.folds)
        .into_par_iter()
        .map(|k| fit_fold(data, models, targets, cfg, &plan, k, needs_pmf).map_err(|e| e.in_fold(k)))
        .collect::<Result<_>>()?;
    let mut nuisances: Vec<TargetNuisances> = (0..models.len() * targets.len())
        .map(|idx| TargetNuisances {
            model: idx / targets.len(),
            target: targets[idx % targets.len()],
            rows: vec![None; n],
            sets: Vec::with_capacity(cfg.folds),
        })
        .collect();
    let (mut clipped, mut evaluated) = (0, 0);
    for fold in folds {
        clipped += fold.clipped;
        evaluated += fold.evaluated;
        for (idx, rows) in fold.rows.into_iter().enumerate() {
            for (i, r) in rows {
                nuisances[idx].rows[i] = r;
            }
        }
        for (idx, set) in fold.sets.into_iter().enumerate() {
            nuisances[idx].sets.push(set);
        }
    }
    Ok(CrossfitOutput {
        plan,
        nuisances,
        clipped_share: clipped as f64 / evaluated.max(1) as f64,
    })
}

fn fit_fold(
    data: CrossfitData<'_>,
    models: &[MisspecModel],
    targets: &[Target],
    cfg: &CrossfitConfig,
    plan: &FoldPlan,
    k: usize,
    needs_pmf: bool,
) -> Result<FoldResult> {
    let train = plan.train_rows(k);
    let held = plan.fold_rows(k);
    let x_train = data.x.select(&train);
    let t_train: Vec<u8> = train.iter().map(|&i| data.t[i]).collect();
    let propensity = fit_unit_propensity(&x_train, &t_train, &cfg.propensity, cfg.clip)?;
    let pmfs = match (needs_pmf, data.network) {
        (true, Some((g, spec))) => Some(analytic_count_pmfs(g, spec, data.x, propensity.as_ref())?),
        _ => None,
    };
    let exposure_fit = match (cfg.exposure_mode, cfg.localization) {
        (ExposureMode::Analytic, _) => ExposureFit::Analytic,
        (ExposureMode::Direct, Localization::Discrete) => {
            let fits = targets
                .iter()
                .enumerate()
                .map(|(j, tg)| {
                    let y: Vec<f64> = train
                        .iter()
                        .map(|&i| f64::from(u8::from((data.z[i] - tg.z).abs() < GRID_TOL)))
                        .collect();
                    cfg.exposure.fit_classifier(&x_train, &y, &vec![1.0; y.len()], 10 + j as u64)
                })
                .collect::<Result<Vec<_>>>()?;
            ExposureFit::Classifier(fits)
        }
        (ExposureMode::Direct, Localization::Kernel(_)) => {
            let z_train: Vec<f64> = train.iter().map(|&i| data.z[i]).collect();
            let mean = cfg.exposure.fit_regression(&x_train, &z_train, &vec![1.0; train.len()], 20)?;
            ExposureFit::Density(ConditionalDensity::fit(&x_train, &z_train, mean, cfg.density_components)?)
        }
    };

    let mut out = FoldResult {
        rows: Vec::with_capacity(models.len() * targets.len()),
        sets: Vec::with_capacity(models.len() * targets.len()),
        clipped: 0,
        evaluated: 0,
    };
    for model in models {
        for (j, target) in targets.iter().enumerate() {
            let spec_for_pmf = data.network.map(|(_, s)| s);
            // exposure propensity at the target for every node; None = unattainable
            let pi_g_all: Vec<Option<f64>> = (0..data.x.len())
                .map(|i| -> Result<Option<f64>> {
                    match &exposure_fit {
                        ExposureFit::Analytic => {
                            let pmfs = pmfs.as_ref().expect("pmfs exist in analytic mode");
                            analytic_exposure_prob(spec_for_pmf.expect("network present"), &pmfs[i], target.z)
                        }
                        ExposureFit::Classifier(fits) => Ok(Some(fits[j].predict(data.x.row(i)))),
                        ExposureFit::Density(d) => Ok(Some(d.density(data.z[i], data.x.row(i)))),
                    }
                })
                .collect::<Result<_>>()?;
            let bounds_all: Vec<Option<BoundPair>> = (0..data.x.len())
                .map(|i| -> Result<Option<BoundPair>> {
                    if pi_g_all[i].is_none() {
                        return Ok(None);
                    }
                    let pmf = pmfs.as_ref().map(|p| p[i].as_slice());
                    model.bounds_at(target.z, data.x.row(i), pmf).map(Some)
                })
                .collect::<Result<_>>()?;
            let omega_all: Vec<f64> = data
                .z
                .iter()
                .map(|&zi| cfg.localization.weight(zi, target.z))
                .collect();

            let levels = |i: usize| {
                let a = alpha_levels(bounds_all[i].expect("checked eligible"));
                let c = cfg.level_clip;
                (a.alpha_plus.clamp(c, 1.0 - c), a.alpha_minus.clamp(c, 1.0 - c))
            };
            let fit_rows: Vec<usize> = train
                .iter()
                .copied()
                .filter(|&i| data.t[i] == target.t && omega_all[i] > 0.0 && bounds_all[i].is_some())
                .collect();
            if fit_rows.is_empty() {
                return Err(Error::Positivity(format!(
                    "no training rows with t={} at exposure {}",
                    target.t, target.z
                )));
            }
            let identity = (0..data.x.len())
                .filter_map(|i| bounds_all[i])
                .all(|b| b.is_identity());
            let x_fit = data.x.select(&fit_rows);
            let y_fit: Vec<f64> = fit_rows.iter().map(|&i| data.y[i]).collect();
            let w_fit: Vec<f64> = fit_rows.iter().map(|&i| omega_all[i]).collect();
            let (a_plus, a_minus): (Vec<f64>, Vec<f64>) = fit_rows.iter().map(|&i| levels(i)).unzip();

            let use_level = cfg.level_feature && !identity;
            let set = if identity {
                // collapsed model: outcome regression, zero tails
                let m = cfg.regression.fit_regression(&x_fit, &y_fit, &w_fit, 5)?;
                let zero: Arc<dyn Predictor> = Arc::new(Constant(0.0));
                NuisanceSet {
                    held_out: k,
                    unit_propensity: propensity.clone(),
                    quantile_upper: m.clone(),
                    quantile_lower: m,
                    tail_up_upper: zero.clone(),
                    tail_low_upper: zero.clone(),
                    tail_up_lower: zero.clone(),
                    tail_low_lower: zero,
                }
            } else {
                let xf_plus = with_level(&x_fit, &a_plus, use_level);
                let xf_minus = with_level(&x_fit, &a_minus, use_level);
                let q_plus = fit_quantile(&xf_plus, &y_fit, &w_fit, &a_plus, &cfg.quantile)?;
                let q_minus = fit_quantile(&xf_minus, &y_fit, &w_fit, &a_minus, &cfg.quantile)?;
                let qp: Vec<f64> = xf_plus.rows().map(|r| q_plus.predict(r)).collect();
                let qm: Vec<f64> = xf_minus.rows().map(|r| q_minus.predict(r)).collect();
                let (gu_p, gl_p) = fit_tail_moments(&xf_plus, &y_fit, &w_fit, &qp, &cfg.regression)?;
                let (gu_m, gl_m) = fit_tail_moments(&xf_minus, &y_fit, &w_fit, &qm, &cfg.regression)?;
                NuisanceSet {
                    held_out: k,
                    unit_propensity: propensity.clone(),
                    quantile_upper: q_plus,
                    quantile_lower: q_minus,
                    tail_up_upper: gu_p,
                    tail_low_upper: gl_p,
                    tail_up_lower: gu_m,
                    tail_low_lower: gl_m,
                }
            };

            let mut rows = Vec::with_capacity(held.len());
            for &i in &held {
                let (Some(pi_g_raw), Some(bounds)) = (pi_g_all[i], bounds_all[i]) else {
                    rows.push((i, None));
                    continue;
                };
                out.evaluated += 1;
                if pi_g_raw < cfg.clip {
                    out.clipped += 1;
                }
                let xi = data.x.row(i);
                let p1 = set.unit_propensity.predict(xi);
                let (ap, am) = levels(i);
                let fp = feature_row(xi, ap, use_level);
                let fm = feature_row(xi, am, use_level);
                let (mut q_plus, mut q_minus) = (set.quantile_upper.predict(&fp), set.quantile_lower.predict(&fm));
                if q_minus > q_plus {
                    std::mem::swap(&mut q_plus, &mut q_minus);
                }
                let r = RowNuisance {
                    fold: k,
                    pi_t: if target.t == 1 { p1 } else { 1.0 - p1 },
                    pi_g: pi_g_raw.max(cfg.clip),
                    bounds,
                    q_plus,
                    q_minus,
                    gu_plus: set.tail_up_upper.predict(&fp),
                    gl_plus: set.tail_low_upper.predict(&fp),
                    gu_minus: set.tail_up_lower.predict(&fm),
                    gl_minus: set.tail_low_lower.predict(&fm),
                    omega: omega_all[i],
                };
                rows.push((i, Some(r)));
            }
            out.rows.push(rows);
            out.sets.push(set);
        }
    }
    Ok(out)
}
