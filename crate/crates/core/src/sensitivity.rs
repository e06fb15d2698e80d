//! Misspecification models and the ratio bounds `b-(z,x) <= 1 <= b+(z,x)` on
//! the exposure-propensity ratio, together with the derived quantile levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exposure::{grid_count, GRID_TOL};

/// Smallest lower ratio bound ever served. Keeps `1/b-` finite.
pub const MIN_B_MINUS: f64 = 1e-6;

/// Lower and upper ratio bound at one `(z, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundPair {
    pub b_minus: f64,
    pub b_plus: f64,
}

impl BoundPair {
    pub const IDENTITY: BoundPair = BoundPair {
        b_minus: 1.0,
        b_plus: 1.0,
    };

    /// Clamps into `[MIN_B_MINUS, 1] x [1, inf)`.
    pub fn clamped(b_minus: f64, b_plus: f64) -> Self {
        let b_minus = if b_minus.is_nan() { MIN_B_MINUS } else { b_minus };
        let b_plus = if b_plus.is_nan() { f64::INFINITY } else { b_plus };
        BoundPair {
            b_minus: b_minus.clamp(MIN_B_MINUS, 1.0),
            b_plus: b_plus.max(1.0),
        }
    }

    pub fn is_identity(&self) -> bool {
        (self.b_minus - 1.0).abs() < 1e-12 && (self.b_plus - 1.0).abs() < 1e-12
    }
}

/// Quantile levels at which the worst-case distributions switch regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailLevel {
    pub alpha_plus: f64,
    pub alpha_minus: f64,
}

/// `a+ = (1 - b-) b+ / (b+ - b-)` and `a- = (1 - b+) b- / (b- - b+)`, with
/// both equal to 1/2 when the bounds coincide.
pub fn alpha_levels(b: BoundPair) -> TailLevel {
    let BoundPair { b_minus, b_plus } = b;
    if (b_plus - b_minus).abs() < 1e-12 {
        return TailLevel {
            alpha_plus: 0.5,
            alpha_minus: 0.5,
        };
    }
    if b_plus.is_infinite() {
        return TailLevel {
            alpha_plus: 1.0 - b_minus,
            alpha_minus: b_minus,
        };
    }
    let alpha_plus = (1.0 - b_minus) * b_plus / (b_plus - b_minus);
    let alpha_minus = (1.0 - b_plus) * b_minus / (b_minus - b_plus);
    TailLevel {
        alpha_plus: alpha_plus.clamp(0.0, 1.0),
        alpha_minus: alpha_minus.clamp(0.0, 1.0),
    }
}

/// Exact distribution of a sum of independent Bernoulli variables.
pub fn poisson_binomial_pmf(probs: &[f64]) -> Result<Vec<f64>> {
    if probs.is_empty() {
        return Err(Error::param("poisson-binomial needs at least one probability"));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::param(format!("probability {p} is not in [0, 1]")));
    }
    let mut pmf = vec![0.0; probs.len() + 1];
    pmf[0] = 1.0;
    for (m, &p) in probs.iter().enumerate() {
        for k in (1..=m + 1).rev() {
            pmf[k] = pmf[k] * (1.0 - p) + pmf[k - 1] * p;
        }
        pmf[0] *= 1.0 - p;
    }
    Ok(pmf)
}

/// How the infimum in the weighted-mean lower bound treats candidate
/// intervals whose inner (numerator) count range is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightedMeanReading {
    /// Empty inner ranges are excluded like `0/0`, and the bound is the
    /// running minimum over slacks up to `eps` so that it is monotone in `eps`.
    #[default]
    NonEmpty,
    /// Empty inner ranges contribute a zero ratio, as written.
    Literal,
}

/// Cumulative sums for O(1) interval probabilities over counts.
struct CountCdf {
    cum: Vec<f64>,
}

impl CountCdf {
    fn new(pmf: &[f64]) -> Self {
        let mut cum = Vec::with_capacity(pmf.len() + 1);
        cum.push(0.0);
        let mut acc = 0.0;
        for p in pmf {
            acc += p;
            cum.push(acc);
        }
        Self { cum }
    }

    fn n(&self) -> usize {
        self.cum.len() - 2
    }

    /// `P(lo <= N <= hi)` for integer bounds, zero if the range is empty.
    fn between(&self, lo: i64, hi: i64) -> f64 {
        let n = self.n() as i64;
        let (lo, hi) = (lo.max(0), hi.min(n));
        if lo > hi {
            0.0
        } else {
            (self.cum[hi as usize + 1] - self.cum[lo as usize]).max(0.0)
        }
    }

    /// `P(N >= k)`.
    fn at_least(&self, k: i64) -> f64 {
        self.between(k, self.n() as i64)
    }
}

fn ceil_tol(x: f64) -> i64 {
    if x.is_infinite() {
        return if x > 0.0 { i64::MAX / 2 } else { i64::MIN / 2 };
    }
    (x - GRID_TOL).ceil() as i64
}

fn floor_tol(x: f64) -> i64 {
    if x.is_infinite() {
        return if x > 0.0 { i64::MAX / 2 } else { i64::MIN / 2 };
    }
    (x + GRID_TOL).floor() as i64
}

/// `count / scale` with `0 / 0 = 0` and `c / 0 = inf`.
fn scaled(count: f64, scale: f64) -> f64 {
    if count == 0.0 {
        0.0
    } else if scale <= 0.0 {
        f64::INFINITY
    } else {
        count / scale
    }
}

fn check_pmf(pmf: &[f64], n: usize) -> Result<()> {
    if pmf.len() != n + 1 {
        return Err(Error::param(format!(
            "count pmf has {} entries for neighborhood size {n}",
            pmf.len()
        )));
    }
    if pmf.iter().any(|p| !p.is_finite() || *p < -1e-15) {
        return Err(Error::param("count pmf has negative or non-finite entries"));
    }
    Ok(())
}

/// Raw weighted-mean ratio bounds at level `k / n` for slack `eps`.
/// Returns `None` for `b-` when every candidate was excluded.
fn weighted_mean_raw(
    cdf: &CountCdf,
    eps: f64,
    k: usize,
    reading: WeightedMeanReading,
) -> Result<(Option<f64>, f64)> {
    let n = cdf.n();
    let en = eps * n as f64;
    let (lo_scale, hi_scale) = (1.0 - en, 1.0 + en);
    let mut b_minus: Option<f64> = None;
    let mut b_plus = 1.0f64;
    let mut any_denominator = false;
    for s in 0..=k {
        let denom = cdf.between(s as i64, k as i64);
        if denom <= 0.0 {
            continue;
        }
        any_denominator = true;
        let inner_lo = ceil_tol(scaled(s as f64, lo_scale));
        let inner_hi = floor_tol(scaled(k as f64, hi_scale));
        if inner_lo <= inner_hi || reading == WeightedMeanReading::Literal {
            let r = cdf.between(inner_lo, inner_hi) / denom;
            b_minus = Some(b_minus.map_or(r, |b| b.min(r)));
        }
        let outer_lo = ceil_tol(scaled(s as f64, hi_scale));
        let outer_hi = floor_tol(scaled(k as f64, lo_scale));
        b_plus = b_plus.max(cdf.between(outer_lo, outer_hi) / denom);
    }
    if !any_denominator {
        return Err(Error::Positivity(format!(
            "every interval ending at count {k} has zero probability"
        )));
    }
    Ok((b_minus, b_plus))
}

/// Slack values at which some rounded endpoint of the weighted-mean
/// intervals changes, restricted to `(0, eps)`.
fn rounding_breakpoints(n: usize, k: usize, eps: f64) -> Vec<f64> {
    let nf = n as f64;
    let mut out = Vec::new();
    // ceil(s / (1 - e n)) passes the integer j when e = (1 - s / j) / n
    for s in 1..=k {
        for j in s + 1..=n {
            out.push((1.0 - s as f64 / j as f64) / nf);
        }
    }
    // floor(k / (1 + e n)) passes the integer j when e = (k / j - 1) / n
    for j in 1..k {
        out.push((k as f64 / j as f64 - 1.0) / nf);
    }
    out.retain(|&e| e > 0.0 && e < eps);
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Weighted-mean ratio bounds for a node with `n = pmf.len() - 1` neighbors
/// at exposure `k / n`.
pub fn weighted_mean_bounds_at(
    eps: f64,
    pmf: &[f64],
    k: usize,
    reading: WeightedMeanReading,
) -> Result<BoundPair> {
    let n = pmf.len().saturating_sub(1);
    check_pmf(pmf, n)?;
    if k > n {
        return Err(Error::param(format!("count {k} exceeds neighborhood size {n}")));
    }
    if !(eps >= 0.0) || eps > 1.0 / n as f64 + 1e-12 {
        return Err(Error::param(format!("weight slack {eps} is not in [0, 1/{n}]")));
    }
    let cdf = CountCdf::new(pmf);
    let (b_minus, b_plus) = weighted_mean_raw(&cdf, eps, k, reading)?;
    let b_minus = match reading {
        WeightedMeanReading::Literal => b_minus.unwrap_or(MIN_B_MINUS),
        WeightedMeanReading::NonEmpty => {
            let mut probes = rounding_breakpoints(n, k, eps);
            let mids: Vec<f64> = probes.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
            probes.extend(mids);
            if let (Some(&first), Some(&last)) = (probes.first(), probes.last()) {
                probes.push(0.5 * first);
                probes.push(0.5 * (last + eps));
            }
            let mut best = b_minus.unwrap_or(1.0);
            for e in probes {
                if let (Some(b), _) = weighted_mean_raw(&cdf, e, k, reading)? {
                    best = best.min(b);
                }
            }
            best
        }
    };
    Ok(BoundPair::clamped(b_minus, b_plus))
}

/// Threshold ratio bounds for a node with `n = pmf.len() - 1` neighbors at
/// binary exposure `z`.
pub fn threshold_bounds_at(eps: f64, c: f64, pmf: &[f64], z: u8) -> Result<BoundPair> {
    let n = pmf.len().saturating_sub(1);
    check_pmf(pmf, n)?;
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::param(format!("threshold level {c} is not in [0, 1]")));
    }
    if !(eps >= 0.0) || eps > c.min(1.0 - c) + 1e-12 {
        return Err(Error::param(format!(
            "threshold slack {eps} is not in [0, min(c, 1 - c)]"
        )));
    }
    let cdf = CountCdf::new(pmf);
    let nf = n as f64;
    let base = cdf.at_least(ceil_tol(nf * c));
    let up = cdf.at_least(ceil_tol(nf * (c + eps)));
    let down = cdf.at_least(ceil_tol(nf * (c - eps)));
    if base <= 0.0 || base >= 1.0 {
        return Err(Error::Positivity(format!(
            "P(count >= {}) = {base} leaves one exposure level unobservable",
            ceil_tol(nf * c)
        )));
    }
    Ok(match z {
        1 => BoundPair::clamped(up / base, down / base),
        0 => BoundPair::clamped((1.0 - down) / (1.0 - base), (1.0 - up) / (1.0 - base)),
        _ => return Err(Error::param("threshold exposure must be 0 or 1")),
    })
}

/// Per-`(z, x-bin)` marginal-sensitivity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsmTable {
    pub rows: Vec<MsmRow>,
    /// Number of equal-width bins of the first covariate over `[-1, 1]`.
    pub x_bins: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsmRow {
    pub z: f64,
    pub x_bin: usize,
    pub b_minus: f64,
    pub b_plus: f64,
}

impl MsmTable {
    pub fn new(rows: Vec<MsmRow>) -> Result<Self> {
        for r in &rows {
            check_msm(r.b_minus, r.b_plus)?;
        }
        let x_bins = rows.iter().map(|r| r.x_bin + 1).max().unwrap_or(1);
        Ok(Self { rows, x_bins })
    }

    /// Parses `z,x_bin,b_minus,b_plus` lines with a header.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Parse(format!("msm table line {}: {line:?}", lineno + 1));
            if fields.len() != 4 {
                return Err(bad());
            }
            rows.push(MsmRow {
                z: fields[0].parse().map_err(|_| bad())?,
                x_bin: fields[1].parse().map_err(|_| bad())?,
                b_minus: fields[2].parse().map_err(|_| bad())?,
                b_plus: fields[3].parse().map_err(|_| bad())?,
            });
        }
        Self::new(rows)
    }

    pub fn x_bin(&self, x: &[f64]) -> usize {
        let x0 = x.first().copied().unwrap_or(0.0);
        let pos = ((x0 + 1.0) / 2.0 * self.x_bins as f64).floor();
        (pos.max(0.0) as usize).min(self.x_bins - 1)
    }

    pub fn lookup(&self, z: f64, x: &[f64]) -> Result<BoundPair> {
        let bin = self.x_bin(x);
        self.rows
            .iter()
            .find(|r| r.x_bin == bin && (r.z - z).abs() < GRID_TOL)
            .map(|r| BoundPair {
                b_minus: r.b_minus,
                b_plus: r.b_plus,
            })
            .ok_or_else(|| Error::param(format!("msm table has no entry for z={z}, x-bin {bin}")))
    }
}

fn check_msm(gamma_minus: f64, gamma_plus: f64) -> Result<()> {
    if !(gamma_minus > 0.0 && gamma_minus <= 1.0 && gamma_plus >= 1.0 && gamma_plus.is_finite()) {
        return Err(Error::param(format!(
            "msm bounds ({gamma_minus}, {gamma_plus}) violate 0 < b- <= 1 <= b+ < inf"
        )));
    }
    Ok(())
}

/// Ratio-bound function `(z, x) -> (b-, b+)`.
#[derive(Debug, Clone, PartialEq)]
pub enum RatioBounds {
    Constant(BoundPair),
    /// Bounds on a node's finite exposure grid.
    Grid(Vec<(f64, BoundPair)>),
    Table(MsmTable),
}

impl RatioBounds {
    pub fn at(&self, z: f64, x: &[f64]) -> Result<BoundPair> {
        match self {
            RatioBounds::Constant(b) => Ok(*b),
            RatioBounds::Grid(levels) => levels
                .iter()
                .find(|(v, _)| (v - z).abs() < GRID_TOL)
                .map(|(_, b)| *b)
                .ok_or_else(|| Error::param(format!("exposure {z} is not on the node's grid"))),
            RatioBounds::Table(t) => t.lookup(z, x),
        }
    }
}

/// Ratio bounds over the full share grid `{0, 1/n, ..., 1}`.
pub fn ratio_bounds_weighted_mean(
    eps: f64,
    pmf: &[f64],
    reading: WeightedMeanReading,
) -> Result<RatioBounds> {
    let n = pmf.len().saturating_sub(1);
    let mut levels = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let b = weighted_mean_bounds_at(eps, pmf, k, reading)?;
        levels.push((k as f64 / n.max(1) as f64, b));
    }
    Ok(RatioBounds::Grid(levels))
}

/// Ratio bounds at both threshold exposures.
pub fn ratio_bounds_threshold(eps: f64, c: f64, pmf: &[f64]) -> Result<RatioBounds> {
    Ok(RatioBounds::Grid(vec![
        (0.0, threshold_bounds_at(eps, c, pmf, 0)?),
        (1.0, threshold_bounds_at(eps, c, pmf, 1)?),
    ]))
}

/// Constant user-specified bounds.
pub fn ratio_bounds_msm(gamma_minus: f64, gamma_plus: f64) -> Result<RatioBounds> {
    check_msm(gamma_minus, gamma_plus)?;
    Ok(RatioBounds::Constant(BoundPair {
        b_minus: gamma_minus,
        b_plus: gamma_plus,
    }))
}

/// A declared misspecification model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MisspecKind {
    WeightedMean {
        eps: f64,
        #[serde(default)]
        reading: WeightedMeanReading,
    },
    Threshold {
        eps: f64,
        c: f64,
    },
    Msm {
        gamma_minus: f64,
        gamma_plus: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        table: Option<MsmTable>,
    },
}

/// Misspecification model scaled by a sensitivity factor. Slack models
/// multiply their slack by the factor; msm models raise their bounds to the
/// power `factor`, so factor 0 always gives the identity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisspecModel {
    pub kind: MisspecKind,
    pub factor: f64,
}

impl MisspecModel {
    pub fn new(kind: MisspecKind, factor: f64) -> Result<Self> {
        if !(factor >= 0.0 && factor.is_finite()) {
            return Err(Error::param(format!("factor {factor} must be finite and >= 0")));
        }
        match &kind {
            MisspecKind::WeightedMean { eps, .. } if !(*eps >= 0.0 && *eps <= 1.0) => {
                return Err(Error::param(format!("weight slack {eps} is not in [0, 1]")))
            }
            MisspecKind::Threshold { eps, c } => {
                if !(0.0..=1.0).contains(c) || !(*eps >= 0.0 && *eps <= c.min(1.0 - c) + 1e-12) {
                    return Err(Error::param(format!(
                        "threshold slack {eps} is not in [0, min(c, 1 - c)] for c = {c}"
                    )));
                }
            }
            MisspecKind::Msm {
                gamma_minus,
                gamma_plus,
                ..
            } => check_msm(*gamma_minus, *gamma_plus)?,
            _ => {}
        }
        Ok(Self { kind, factor })
    }

    /// The same model at another factor.
    pub fn with_factor(&self, factor: f64) -> Result<Self> {
        Self::new(self.kind.clone(), factor)
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            MisspecKind::WeightedMean { .. } => "weighted_mean",
            MisspecKind::Threshold { .. } => "threshold",
            MisspecKind::Msm { .. } => "msm",
        }
    }

    /// Whether the bounds depend on the treated-neighbor count distribution.
    pub fn needs_count_pmf(&self) -> bool {
        !matches!(self.kind, MisspecKind::Msm { .. })
    }

    /// Bounds at exposure `z` for a node with covariates `x` and
    /// treated-neighbor count distribution `pmf` (ignored by msm models).
    pub fn bounds_at(&self, z: f64, x: &[f64], pmf: Option<&[f64]>) -> Result<BoundPair> {
        if self.factor == 0.0 {
            return Ok(BoundPair::IDENTITY);
        }
        let need_pmf = || pmf.ok_or_else(|| Error::param("count pmf required by this model"));
        match &self.kind {
            MisspecKind::WeightedMean { eps, reading } => {
                let pmf = need_pmf()?;
                let n = pmf.len() - 1;
                let k = grid_count(z, n).ok_or_else(|| {
                    Error::param(format!("exposure {z} is not attainable with {n} neighbors"))
                })?;
                let eps = (eps * self.factor).min(1.0 / n as f64);
                weighted_mean_bounds_at(eps, pmf, k, *reading)
            }
            MisspecKind::Threshold { eps, c } => {
                let eps = (eps * self.factor).min(c.min(1.0 - c));
                let z = if z > 0.5 { 1 } else { 0 };
                threshold_bounds_at(eps, *c, need_pmf()?, z)
            }
            MisspecKind::Msm {
                gamma_minus,
                gamma_plus,
                table,
            } => {
                let b = match table {
                    Some(t) => t.lookup(z, x)?,
                    None => BoundPair {
                        b_minus: *gamma_minus,
                        b_plus: *gamma_plus,
                    },
                };
                Ok(BoundPair::clamped(
                    b.b_minus.powf(self.factor),
                    b.b_plus.powf(self.factor),
                ))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
        poisson_binomial_pmf(&vec![p; n]).unwrap()
    }

    #[test]
    fn pmf_small_cases() {
        let pmf = poisson_binomial_pmf(&[0.5, 0.5]).unwrap();
        assert_eq!(pmf, vec![0.25, 0.5, 0.25]);
        let pmf = poisson_binomial_pmf(&[1.0, 1.0, 0.0]).unwrap();
        assert_eq!(pmf, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(poisson_binomial_pmf(&[]).is_err());
        assert!(poisson_binomial_pmf(&[1.2]).is_err());
    }

    #[test]
    fn pmf_matches_enumeration() {
        let mut r = rng::seeded(4);
        for _ in 0..20 {
            let probs: Vec<f64> = (0..10).map(|_| r.random::<f64>()).collect();
            let pmf = poisson_binomial_pmf(&probs).unwrap();
            let mut brute = [0.0; 11];
            for mask in 0u32..1 << 10 {
                let mut p = 1.0;
                for (j, q) in probs.iter().enumerate() {
                    p *= if mask >> j & 1 == 1 { *q } else { 1.0 - q };
                }
                brute[mask.count_ones() as usize] += p;
            }
            for (a, b) in pmf.iter().zip(brute) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_examples() {
        let a = alpha_levels(BoundPair::IDENTITY);
        assert_eq!((a.alpha_plus, a.alpha_minus), (0.5, 0.5));
        let a = alpha_levels(BoundPair {
            b_minus: 0.5,
            b_plus: 2.0,
        });
        assert!((a.alpha_plus - 2.0 / 3.0).abs() < 1e-15);
        assert!((a.alpha_minus - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn weight_identity_on_random_pairs() {
        let mut r = rng::seeded(11);
        for _ in 0..1000 {
            let b = BoundPair {
                b_minus: r.random_range(0.01..1.0),
                b_plus: r.random_range(1.0..20.0),
            };
            let a = alpha_levels(b);
            let up = (1.0 - a.alpha_plus) / b.b_minus + a.alpha_plus / b.b_plus;
            let lo = (1.0 - a.alpha_minus) / b.b_plus + a.alpha_minus / b.b_minus;
            assert!((up - 1.0).abs() < 1e-10, "{b:?}");
            assert!((lo - 1.0).abs() < 1e-10, "{b:?}");
            assert!((0.0..=1.0).contains(&a.alpha_plus));
            assert!((0.0..=1.0).contains(&a.alpha_minus));
        }
    }

    #[test]
    fn reciprocal_bounds_give_complementary_levels() {
        for g in [1.1, 2.0, 5.0] {
            let a = alpha_levels(BoundPair {
                b_minus: 1.0 / g,
                b_plus: g,
            });
            assert!((a.alpha_plus + a.alpha_minus - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_mean_zero_slack_is_identity() {
        let pmf = binomial_pmf(6, 0.3);
        for reading in [WeightedMeanReading::NonEmpty, WeightedMeanReading::Literal] {
            let RatioBounds::Grid(levels) = ratio_bounds_weighted_mean(0.0, &pmf, reading).unwrap()
            else {
                unreachable!()
            };
            assert!(levels.iter().all(|(_, b)| b.is_identity()));
        }
    }

    #[test]
    fn weighted_mean_two_neighbors_enumerated() {
        // fair coins, n = 2, eps = 0.25, z = 1: 1 - eps n = 0.5, 1 + eps n = 1.5
        // inner ranges: s=0 -> [0, 1], s=1/2 -> [2, 1] empty, s=1 -> [4, 1] empty
        // outer ranges: s=0 -> [0, 2], s=1/2 -> [1, 2], s=1 -> [2, 2] (equal to the denominators)
        let pmf = [0.25, 0.5, 0.25];
        let b = weighted_mean_bounds_at(0.25, &pmf, 2, WeightedMeanReading::NonEmpty).unwrap();
        assert!((b.b_minus - 0.75).abs() < 1e-15);
        assert_eq!(b.b_plus, 1.0);
        let lit = weighted_mean_bounds_at(0.25, &pmf, 2, WeightedMeanReading::Literal).unwrap();
        assert_eq!(lit.b_minus, MIN_B_MINUS);
        assert_eq!(lit.b_plus, 1.0);
    }

    #[test]
    fn weighted_mean_rejects_slack_above_inverse_degree() {
        let pmf = binomial_pmf(4, 0.5);
        assert!(weighted_mean_bounds_at(0.3, &pmf, 2, WeightedMeanReading::NonEmpty).is_err());
    }

    #[test]
    fn weighted_mean_zero_probability_is_positivity_error() {
        let pmf = [0.0, 0.0, 1.0];
        let err = weighted_mean_bounds_at(0.1, &pmf, 0, WeightedMeanReading::NonEmpty).unwrap_err();
        assert!(matches!(err, Error::Positivity(_)));
    }

    #[test]
    fn threshold_two_neighbors_enumerated() {
        let pmf = [0.25, 0.5, 0.25];
        let b1 = threshold_bounds_at(0.25, 0.5, &pmf, 1).unwrap();
        assert!((b1.b_minus - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(b1.b_plus, 1.0);
        // z = 0: P(N < 1) = 0.25; P(N < 2) = 0.75 -> b+ = 3 ; P(N < 1) again -> b- = 1
        let b0 = threshold_bounds_at(0.25, 0.5, &pmf, 0).unwrap();
        assert_eq!(b0.b_minus, 1.0);
        assert!((b0.b_plus - 3.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_zero_slack_is_identity() {
        let pmf = binomial_pmf(7, 0.4);
        let RatioBounds::Grid(levels) = ratio_bounds_threshold(0.0, 0.5, &pmf).unwrap() else {
            unreachable!()
        };
        assert!(levels.iter().all(|(_, b)| b.is_identity()));
    }

    #[test]
    fn threshold_unobservable_level_is_positivity_error() {
        let pmf = [1.0, 0.0, 0.0];
        assert!(matches!(
            threshold_bounds_at(0.1, 0.5, &pmf, 1),
            Err(Error::Positivity(_))
        ));
    }

    #[test]
    fn msm_examples() {
        let b = ratio_bounds_msm(1.0, 1.0).unwrap().at(0.3, &[0.1]).unwrap();
        assert!(b.is_identity());
        let b = ratio_bounds_msm(0.5, 2.0).unwrap().at(0.9, &[-0.7]).unwrap();
        assert_eq!((b.b_minus, b.b_plus), (0.5, 2.0));
        assert!(ratio_bounds_msm(1.2, 2.0).is_err());
        assert!(ratio_bounds_msm(0.5, 0.9).is_err());
    }

    #[test]
    fn msm_table_lookup() {
        let text = "z,x_bin,b_minus,b_plus\n0,0,0.9,1.1\n0,1,0.8,1.3\n1,0,0.7,1.5\n1,1,0.6,2.0\n";
        let table = MsmTable::from_csv(text).unwrap();
        let rb = RatioBounds::Table(table.clone());
        for row in &table.rows {
            let x = if row.x_bin == 0 { -0.5 } else { 0.5 };
            let b = rb.at(row.z, &[x]).unwrap();
            assert_eq!((b.b_minus, b.b_plus), (row.b_minus, row.b_plus));
        }
        assert!(rb.at(0.5, &[0.0]).is_err());
        assert!(MsmTable::from_csv("z,x_bin,b_minus,b_plus\n0,0,1.2,1.0\n").is_err());
    }

    #[test]
    fn factor_zero_is_identity_for_all_models() {
        let pmf = binomial_pmf(5, 0.5);
        let models = [
            MisspecKind::WeightedMean {
                eps: 0.1,
                reading: WeightedMeanReading::NonEmpty,
            },
            MisspecKind::Threshold { eps: 0.2, c: 0.5 },
            MisspecKind::Msm {
                gamma_minus: 0.5,
                gamma_plus: 2.0,
                table: None,
            },
        ];
        for kind in models {
            let m = MisspecModel::new(kind, 0.0).unwrap();
            assert!(m.bounds_at(0.6, &[0.0], Some(&pmf)).unwrap().is_identity());
        }
    }

    #[test]
    fn msm_factor_is_a_power() {
        let m = MisspecModel::new(
            MisspecKind::Msm {
                gamma_minus: 0.5,
                gamma_plus: 2.0,
                table: None,
            },
            2.0,
        )
        .unwrap();
        let b = m.bounds_at(0.0, &[0.0], None).unwrap();
        assert_eq!((b.b_minus, b.b_plus), (0.25, 4.0));
    }

    fn random_pmf(r: &mut rng::Rng, n: usize) -> Vec<f64> {
        let probs: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.95)).collect();
        poisson_binomial_pmf(&probs).unwrap()
    }

    proptest! {
        #[test]
        fn weighted_mean_bounds_are_ordered(seed in 0u64..10_000, n in 1usize..15, frac in 0.0f64..=1.0) {
            let mut r = rng::seeded(seed);
            let pmf = random_pmf(&mut r, n);
            let eps = frac / n as f64;
            let k = r.random_range(0..=n);
            for reading in [WeightedMeanReading::NonEmpty, WeightedMeanReading::Literal] {
                let b = weighted_mean_bounds_at(eps, &pmf, k, reading).unwrap();
                prop_assert!(b.b_minus > 0.0 && b.b_minus <= 1.0 && b.b_plus >= 1.0);
            }
        }

        #[test]
        fn weighted_mean_bounds_widen_with_slack(seed in 0u64..10_000, n in 1usize..12) {
            let mut r = rng::seeded(seed);
            let pmf = random_pmf(&mut r, n);
            let k = r.random_range(0..=n);
            let mut prev = BoundPair::IDENTITY;
            for step in 0..=10 {
                let eps = step as f64 / (10.0 * n as f64);
                let b = weighted_mean_bounds_at(eps, &pmf, k, WeightedMeanReading::NonEmpty).unwrap();
                prop_assert!(b.b_minus <= prev.b_minus + 1e-12);
                prop_assert!(b.b_plus >= prev.b_plus - 1e-12);
                prev = b;
            }
        }

        #[test]
        fn threshold_bounds_widen_with_slack(seed in 0u64..10_000, n in 2usize..30, c in 0.2f64..0.8) {
            let mut r = rng::seeded(seed);
            let pmf = random_pmf(&mut r, n);
            for z in [0u8, 1] {
                let mut prev = BoundPair::IDENTITY;
                for step in 0..=10 {
                    let eps = c.min(1.0 - c) * step as f64 / 10.0;
                    let b = threshold_bounds_at(eps, c, &pmf, z).unwrap();
                    prop_assert!(b.b_minus <= prev.b_minus + 1e-12 && b.b_plus >= prev.b_plus - 1e-12);
                    prev = b;
                }
            }
        }

        #[test]
        fn threshold_complement_identity(seed in 0u64..10_000, n in 2usize..30, c in 0.2f64..0.8, frac in 0.0f64..0.9) {
            // the shifted level-1 probability at each extreme plus the shifted
            // level-0 probability at the same extreme is one
            let mut r = rng::seeded(seed);
            let pmf = random_pmf(&mut r, n);
            let eps = frac * c.min(1.0 - c);
            let base = CountCdf::new(&pmf).at_least(ceil_tol(n as f64 * c));
            let b1 = threshold_bounds_at(eps, c, &pmf, 1).unwrap();
            let b0 = threshold_bounds_at(eps, c, &pmf, 0).unwrap();
            // tolerance covers the MIN_B_MINUS floor on near-zero ratios
            prop_assert!((b1.b_minus * base + b0.b_plus * (1.0 - base) - 1.0).abs() < 2.0 * MIN_B_MINUS);
            prop_assert!((b1.b_plus * base + b0.b_minus * (1.0 - base) - 1.0).abs() < 2.0 * MIN_B_MINUS);
        }
    }
}
