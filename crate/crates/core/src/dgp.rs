//! Synthetic covariates, treatments, exposures and outcomes, with analytic
//! ground truth for the simulation studies.

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exposure::{apply_exposure, ExposureSpec, ExposureVector, SupportKind};
use crate::netgraph::Graph;
use crate::rng;

/// Row-major `n x d` covariate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    d: usize,
    data: Vec<f64>,
}

impl Covariates {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::param("covariate rows must be nonempty"));
        }
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::param("covariate rows have different lengths"));
        }
        Ok(Self {
            d,
            data: rows.concat(),
        })
    }

    pub fn from_flat(d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 || !data.len().is_multiple_of(d) {
            return Err(Error::param("flat covariate buffer does not match dimension"));
        }
        Ok(Self { d, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.d)
    }

    /// Rows at the given indices, in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { d: self.d, data }
    }
}

/// Coefficients of the outcome surface `m(t,z,x) = tau t + delta z + gamma t z + f(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeParams {
    pub tau: f64,
    pub delta: f64,
    pub gamma: f64,
    pub noise_sd: f64,
}

impl Default for OutcomeParams {
    fn default() -> Self {
        Self {
            tau: 0.8,
            delta: 0.6,
            gamma: 0.2,
            noise_sd: 1.0,
        }
    }
}

/// Baseline `f` applied to one coordinate.
pub fn f_scalar(x: f64) -> f64 {
    0.6 * x.tanh() + 0.4 * x.sin() - 0.2 * x * x
}

/// Baseline summed over coordinates.
pub fn f_baseline(x: &[f64]) -> f64 {
    x.iter().map(|&v| f_scalar(v)).sum()
}

/// Mean of `f_scalar` under `U(-1, 1)`: the odd terms vanish and `E[x^2] = 1/3`.
pub const F_SCALAR_MEAN: f64 = -0.2 / 3.0;

/// `m(t, z, x)`.
pub fn outcome_mean(p: &OutcomeParams, t: u8, z: f64, x: &[f64]) -> f64 {
    let t = f64::from(t);
    p.tau * t + p.delta * z + p.gamma * t * z + f_baseline(x)
}

/// Default propensity coefficients: every entry `0.8 / sqrt(d)`.
pub fn default_beta(d: usize) -> Vec<f64> {
    vec![0.8 / (d as f64).sqrt(); d]
}

/// Logistic unit propensity `1 / (1 + exp(-beta'x))`.
pub fn true_propensity(x: &[f64], beta: &[f64]) -> f64 {
    let lin: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
    1.0 / (1.0 + (-lin).exp())
}

/// Iid `U(-1, 1)` covariates.
pub fn sample_covariates(n: usize, d: usize, seed: u64) -> Result<Covariates> {
    if n == 0 || d == 0 {
        return Err(Error::param("need n >= 1 and d >= 1"));
    }
    let mut r = rng::seeded(seed);
    let data = (0..n * d).map(|_| r.random_range(-1.0..=1.0)).collect();
    Ok(Covariates { d, data })
}

/// Independent Bernoulli treatments with logistic propensities.
pub fn assign_treatments(x: &Covariates, beta: &[f64], seed: u64) -> Result<Vec<u8>> {
    if beta.len() != x.dim() {
        return Err(Error::param(format!(
            "beta has {} entries for {} covariates",
            beta.len(),
            x.dim()
        )));
    }
    let mut r = rng::seeded(seed);
    Ok(x.rows()
        .map(|row| u8::from(r.random::<f64>() < true_propensity(row, beta)))
        .collect())
}

/// Settings of one simulated network dataset.
#[derive(Debug, Clone)]
pub struct DgpConfig {
    pub d: usize,
    pub beta_t: Vec<f64>,
    pub outcome: OutcomeParams,
    pub spec_true: ExposureSpec,
    pub spec_assumed: ExposureSpec,
    pub seed: u64,
}

impl DgpConfig {
    /// Default coefficients with the given mappings.
    pub fn new(d: usize, spec_true: ExposureSpec, spec_assumed: ExposureSpec, seed: u64) -> Self {
        Self {
            d,
            beta_t: default_beta(d),
            outcome: OutcomeParams::default(),
            spec_true,
            spec_assumed,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.beta_t.len() != self.d {
            return Err(Error::param("d must be >= 1 and match beta_t"));
        }
        if !(self.outcome.noise_sd >= 0.0) {
            return Err(Error::param("noise_sd must be >= 0"));
        }
        self.spec_true.validate()?;
        self.spec_assumed.validate()
    }
}

/// Observed network data, with the exposure under both mappings.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Covariates,
    pub t: Vec<u8>,
    pub z_true: ExposureVector,
    pub z_assumed: ExposureVector,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Serializes as CSV with columns `node_id, x_0.., t, z_true, z_assumed, y`.
    /// Floats use the shortest representation that parses back exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node_id");
        for k in 0..self.x.dim() {
            let _ = write!(out, ",x_{k}");
        }
        out.push_str(",t,z_true,z_assumed,y\n");
        for i in 0..self.len() {
            let _ = write!(out, "{i}");
            for v in self.x.row(i) {
                let _ = write!(out, ",{v:?}");
            }
            let _ = writeln!(
                out,
                ",{},{:?},{:?},{:?}",
                self.t[i], self.z_true.values[i], self.z_assumed.values[i], self.y[i]
            );
        }
        out
    }

    /// Parses the format written by [`Dataset::to_csv`].
    pub fn from_csv(text: &str, support_kind: SupportKind) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset file".into()))?
            .split(',')
            .collect();
        let d = header.iter().filter(|h| h.starts_with("x_")).count();
        let expected = d + 5;
        if d == 0 || header.len() != expected || header[0] != "node_id" {
            return Err(Error::Parse("unexpected dataset header".into()));
        }
        let (mut xs, mut t, mut zt, mut za, mut y) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Parse(format!("dataset line {}", lineno + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != expected {
                return Err(bad());
            }
            for v in &f[1..=d] {
                xs.push(v.parse::<f64>().map_err(|_| bad())?);
            }
            t.push(f[d + 1].parse::<u8>().map_err(|_| bad())?);
            zt.push(f[d + 2].parse::<f64>().map_err(|_| bad())?);
            za.push(f[d + 3].parse::<f64>().map_err(|_| bad())?);
            y.push(f[d + 4].parse::<f64>().map_err(|_| bad())?);
        }
        Ok(Self {
            x: Covariates::from_flat(d, xs)?,
            t,
            z_true: ExposureVector {
                values: zt,
                support_kind,
            },
            z_assumed: ExposureVector {
                values: za,
                support_kind,
            },
            y,
        })
    }
}

/// Stream ids for the independent stages of one simulation.
const STREAM_X: u64 = 0;
const STREAM_T: u64 = 1;
const STREAM_Y: u64 = 2;

/// Covariates, treatments, both exposures and outcomes. Outcomes are
/// generated from the true exposure only.
pub fn simulate(config: &DgpConfig, g: &Graph) -> Result<Dataset> {
    config.validate()?;
    let n = g.node_count();
    let x = sample_covariates(n, config.d, rng::child_seed(config.seed, STREAM_X))?;
    let t = assign_treatments(&x, &config.beta_t, rng::child_seed(config.seed, STREAM_T))?;
    let z_true = apply_exposure(&config.spec_true, g, &t)?;
    let z_assumed = apply_exposure(&config.spec_assumed, g, &t)?;
    let mut r = rng::seeded(rng::child_seed(config.seed, STREAM_Y));
    let sd = config.outcome.noise_sd;
    let y = (0..n)
        .map(|i| {
            let noise: f64 = StandardNormal.sample(&mut r);
            outcome_mean(&config.outcome, t[i], z_true.values[i], x.row(i)) + sd * noise
        })
        .collect();
    Ok(Dataset {
        x,
        t,
        z_true,
        z_assumed,
        y,
    })
}

/// Contrast type between two `(t, z)` arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    /// Varies `t` at fixed `z`.
    Direct,
    /// Varies `z` at fixed `t`.
    Spillover,
    /// Varies both.
    Overall,
}

impl EffectKind {
    pub fn name(self) -> &'static str {
        match self {
            EffectKind::Direct => "direct",
            EffectKind::Spillover => "spillover",
            EffectKind::Overall => "overall",
        }
    }

    /// Checks that `(t, z)` and `(t', z')` form a contrast of this kind.
    pub fn validate(self, a: (u8, f64), b: (u8, f64)) -> Result<()> {
        let ok = match self {
            EffectKind::Direct => (a.1 - b.1).abs() < 1e-12 && a.0 != b.0,
            EffectKind::Spillover => a.0 == b.0 && (a.1 - b.1).abs() >= 1e-12,
            EffectKind::Overall => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!(
                "{} effect is undefined between {a:?} and {b:?}",
                self.name()
            )))
        }
    }
}

/// Analytic effect `m(t, z, x) - m(t', z', x)`; the baseline cancels so the
/// value is the same for every `x`.
pub fn true_effect(p: &OutcomeParams, kind: EffectKind, a: (u8, f64), b: (u8, f64)) -> Result<f64> {
    kind.validate(a, b)?;
    Ok(outcome_mean(p, a.0, a.1, &[]) - outcome_mean(p, b.0, b.1, &[]))
}

/// Non-network design with a continuous exposure, used to study kernel
/// localization. `X ~ U(-1, 1)`, `T | X` logistic, `Z | X ~ N(z_mean + z_slope X, z_sd^2)`
/// and `Y = tau T + amp sin(freq Z) + f(X) + noise_sd eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousDesign {
    pub beta_t: f64,
    pub tau: f64,
    pub amp: f64,
    pub freq: f64,
    pub z_mean: f64,
    pub z_slope: f64,
    pub z_sd: f64,
    pub noise_sd: f64,
}

impl Default for ContinuousDesign {
    fn default() -> Self {
        Self {
            beta_t: 0.8,
            tau: 0.8,
            amp: 2.0,
            freq: 6.0,
            z_mean: 0.3,
            z_slope: 0.1,
            z_sd: 0.25,
            noise_sd: 1.0,
        }
    }
}

impl ContinuousDesign {
    pub fn mean(&self, t: u8, z: f64, x: &[f64]) -> f64 {
        self.tau * f64::from(t) + self.amp * (self.freq * z).sin() + f_baseline(x)
    }

    /// Conditional density of `Z` at `z` given `x`.
    pub fn exposure_density(&self, z: f64, x: &[f64]) -> f64 {
        let m = self.z_mean + self.z_slope * x[0];
        let u = (z - m) / self.z_sd;
        (-0.5 * u * u).exp() / (self.z_sd * (2.0 * std::f64::consts::PI).sqrt())
    }

    pub fn propensity(&self, x: &[f64]) -> f64 {
        true_propensity(x, &[self.beta_t])
    }

    /// Draws `n` iid rows. The exposure is stored in both exposure columns.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let x = sample_covariates(n, 1, rng::child_seed(seed, STREAM_X))?;
        let t = assign_treatments(&x, &[self.beta_t], rng::child_seed(seed, STREAM_T))?;
        let mut r = rng::seeded(rng::child_seed(seed, STREAM_Y));
        let mut z = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let xi = x.row(i);
            let e1: f64 = StandardNormal.sample(&mut r);
            let e2: f64 = StandardNormal.sample(&mut r);
            let zi = self.z_mean + self.z_slope * xi[0] + self.z_sd * e1;
            z.push(zi);
            y.push(self.mean(t[i], zi, xi) + self.noise_sd * e2);
        }
        let zv = ExposureVector {
            values: z,
            support_kind: SupportKind::Continuous,
        };
        Ok(Dataset {
            x,
            t,
            z_true: zv.clone(),
            z_assumed: zv,
            y,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::gen_erdos_renyi;

    fn er_graph(n: usize, seed: u64) -> Graph {
        gen_erdos_renyi(n, 10.0 / n as f64, seed)
            .unwrap()
            .without_isolates()
            .0
    }

    #[test]
    fn covariates_are_uniform_and_reproducible() {
        let x = sample_covariates(100_000, 1, 3).unwrap();
        let mean = x.rows().map(|r| r[0]).sum::<f64>() / 1e5;
        assert!(mean.abs() < 0.02);
        let small = sample_covariates(1, 3, 5).unwrap();
        assert!(small.row(0).iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(sample_covariates(50, 2, 9).unwrap(), sample_covariates(50, 2, 9).unwrap());
    }

    #[test]
    fn propensity_values() {
        assert_eq!(true_propensity(&[0.0, 0.0], &[0.3, -2.0]), 0.5);
        let p = true_propensity(&[1.0], &[0.8]);
        assert!((p - 0.689_974_481_127_612_8).abs() < 1e-12);
        assert!((true_propensity(&[-1.0], &[0.8]) - (1.0 - p)).abs() < 1e-15);
    }

    #[test]
    fn treatment_assignment() {
        let x = sample_covariates(10_000, 2, 1).unwrap();
        let t = assign_treatments(&x, &[0.0, 0.0], 2).unwrap();
        let frac = t.iter().map(|&v| f64::from(v)).sum::<f64>() / 1e4;
        assert!((frac - 0.5).abs() < 0.02);
        assert_eq!(t, assign_treatments(&x, &[0.0, 0.0], 2).unwrap());
        let pos = Covariates::from_rows(&vec![vec![0.9]; 1000]).unwrap();
        let t = assign_treatments(&pos, &[50.0], 4).unwrap();
        assert!(t.iter().all(|&v| v == 1));
    }

    #[test]
    fn outcome_mean_values() {
        let p = OutcomeParams::default();
        assert_eq!(outcome_mean(&p, 0, 0.0, &[0.0]), 0.0);
        assert!((outcome_mean(&p, 1, 1.0, &[0.0]) - 1.6).abs() < 1e-15);
        let f = 0.6 * 0.3f64.tanh() + 0.4 * 0.3f64.sin() - 0.2 * 0.09;
        assert!((outcome_mean(&p, 1, 0.5, &[0.3]) - (0.8 + 0.3 + 0.1 + f)).abs() < 1e-15);
    }

    #[test]
    fn noiseless_correct_mapping_reproduces_mean() {
        let g = er_graph(300, 1);
        let mut cfg = DgpConfig::new(2, ExposureSpec::Mean, ExposureSpec::Mean, 8);
        cfg.outcome.noise_sd = 0.0;
        let data = simulate(&cfg, &g).unwrap();
        for i in 0..data.len() {
            let m = outcome_mean(&cfg.outcome, data.t[i], data.z_assumed.values[i], data.x.row(i));
            assert_eq!(data.y[i], m);
        }
    }

    #[test]
    fn residuals_are_centered_and_unconfounded() {
        let g = er_graph(10_000, 2);
        let cfg = DgpConfig::new(1, ExposureSpec::Mean, ExposureSpec::Mean, 3);
        let data = simulate(&cfg, &g).unwrap();
        let n = data.len() as f64;
        let res: Vec<f64> = (0..data.len())
            .map(|i| data.y[i] - outcome_mean(&cfg.outcome, data.t[i], data.z_true.values[i], data.x.row(i)))
            .collect();
        let mean = res.iter().sum::<f64>() / n;
        assert!(mean.abs() < 0.03);
        let tbar = data.t.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let cov = res
            .iter()
            .zip(&data.t)
            .map(|(r, &t)| (r - mean) * (f64::from(t) - tbar))
            .sum::<f64>()
            / n;
        assert!(cov.abs() < 0.02);
    }

    #[test]
    fn assumed_mapping_never_changes_outcomes() {
        let g = er_graph(500, 4);
        let a = DgpConfig::new(1, ExposureSpec::KhopMean { radius: 2 }, ExposureSpec::Mean, 5);
        let mut b = a.clone();
        b.spec_assumed = ExposureSpec::Threshold { c: 0.3 };
        let (da, db) = (simulate(&a, &g).unwrap(), simulate(&b, &g).unwrap());
        assert_eq!(da.y, db.y);
        assert_eq!(da.z_true, db.z_true);
        assert_ne!(da.z_assumed, db.z_assumed);
    }

    #[test]
    fn effect_values() {
        let p = OutcomeParams::default();
        let direct = true_effect(&p, EffectKind::Direct, (1, 0.0), (0, 0.0)).unwrap();
        assert!((direct - 0.8).abs() < 1e-15);
        let spill = true_effect(&p, EffectKind::Spillover, (0, 1.0), (0, 0.0)).unwrap();
        assert!((spill - 0.6).abs() < 1e-15);
        let overall = true_effect(&p, EffectKind::Overall, (1, 1.0), (0, 0.0)).unwrap();
        assert!((overall - 1.6).abs() < 1e-15);
        assert!(true_effect(&p, EffectKind::Direct, (1, 0.5), (0, 0.0)).is_err());
        assert!(true_effect(&p, EffectKind::Spillover, (1, 0.5), (0, 0.0)).is_err());
    }

    #[test]
    fn effects_do_not_depend_on_covariates() {
        let p = OutcomeParams::default();
        let x = sample_covariates(200, 3, 6).unwrap();
        for row in x.rows() {
            let e = outcome_mean(&p, 1, 0.4, row) - outcome_mean(&p, 0, 0.4, row);
            assert!((e - (p.tau + p.gamma * 0.4)).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_mean_constant() {
        // midpoint quadrature of f over [-1, 1]
        let m = 200_000;
        let q: f64 = (0..m)
            .map(|k| f_scalar(-1.0 + (k as f64 + 0.5) * 2.0 / m as f64))
            .sum::<f64>()
            / m as f64;
        assert!((q - F_SCALAR_MEAN).abs() < 1e-9);
    }

    #[test]
    fn csv_round_trip() {
        let g = er_graph(200, 7);
        let cfg = DgpConfig::new(3, ExposureSpec::Mean, ExposureSpec::Threshold { c: 0.5 }, 1);
        let data = simulate(&cfg, &g).unwrap();
        let text = data.to_csv();
        assert!(text.starts_with("node_id,x_0,x_1,x_2,t,z_true,z_assumed,y\n"));
        let back = Dataset::from_csv(&text, SupportKind::Discrete).unwrap();
        assert_eq!(back.x, data.x);
        assert_eq!(back.t, data.t);
        assert_eq!(back.z_true.values, data.z_true.values);
        assert_eq!(back.z_assumed.values, data.z_assumed.values);
        assert_eq!(back.y, data.y);
    }

    #[test]
    fn continuous_design_density_integrates_to_one() {
        let d = ContinuousDesign::default();
        let step = 1e-3;
        let total: f64 = (-4000..4000)
            .map(|k| d.exposure_density(k as f64 * step, &[0.5]) * step)
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
        let data = d.sample(2000, 3).unwrap();
        assert_eq!(data.z_true, data.z_assumed);
        assert_eq!(data.z_true.support_kind, SupportKind::Continuous);
    }
}
