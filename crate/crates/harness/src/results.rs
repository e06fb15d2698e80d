//! Result records, CSV emission and parsing, and JSON summaries.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// CSV column order.
pub const COLUMNS: [&str; 14] = [
    "run", "factor", "scenario", "estimand", "t", "z", "t_prime", "z_prime", "lo", "hi", "truth", "covered", "width",
    "seconds",
];

/// One interval estimate compared with its reference value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run: usize,
    pub factor: f64,
    pub scenario: String,
    pub estimand: String,
    pub t: u8,
    pub z: f64,
    pub t_prime: Option<u8>,
    pub z_prime: Option<f64>,
    pub lo: f64,
    pub hi: f64,
    pub truth: f64,
    pub covered: bool,
    pub width: f64,
    pub seconds: f64,
}

impl ResultRecord {
    /// Record with `covered` and `width` derived from the interval.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        run: usize,
        factor: f64,
        scenario: &str,
        estimand: impl Into<String>,
        a: (u8, f64),
        b: Option<(u8, f64)>,
        interval: (f64, f64),
        truth: f64,
        seconds: f64,
    ) -> Self {
        let (lo, hi) = interval;
        Self {
            run,
            factor,
            scenario: scenario.to_string(),
            estimand: estimand.into(),
            t: a.0,
            z: a.1,
            t_prime: b.map(|v| v.0),
            z_prime: b.map(|v| v.1),
            lo,
            hi,
            truth,
            covered: lo <= truth && truth <= hi,
            width: hi - lo,
            seconds,
        }
    }

    /// Estimand without a `:detail` suffix, e.g. `capo` for `capo:x=0.5`.
    pub fn family(&self) -> &str {
        self.estimand.split(':').next().unwrap_or(&self.estimand)
    }
}

pub fn to_csv_string(records: &[ResultRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record(COLUMNS)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn from_csv_str(text: &str) -> Result<Vec<ResultRecord>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        anyhow::bail!("unexpected result columns {header:?}");
    }
    rd.deserialize().map(|r| r.context("malformed result row")).collect()
}

pub fn write_csv(records: &[ResultRecord], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(records)?).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    from_csv_str(&text)
}

/// CSV text with the timing column removed, for determinism comparisons.
pub fn strip_timing(csv_text: &str) -> String {
    csv_text
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Aggregate over records sharing scenario, estimand family and factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub scenario: String,
    pub estimand: String,
    pub factor: f64,
    pub n: usize,
    pub coverage: f64,
    pub mean_width: f64,
}

/// JSON summary of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub header: Vec<String>,
    pub groups: Vec<GroupSummary>,
    /// Experiment-specific statistics.
    pub details: serde_json::Value,
}

pub fn summarize(records: &[ResultRecord]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<(String, String, u64), (usize, usize, f64)> = BTreeMap::new();
    for r in records {
        let key = (r.scenario.clone(), r.family().to_string(), r.factor.to_bits());
        let g = groups.entry(key).or_insert((0, 0, 0.0));
        g.0 += 1;
        g.1 += usize::from(r.covered);
        g.2 += r.width;
    }
    groups
        .into_iter()
        .map(|((scenario, estimand, f), (n, c, w))| GroupSummary {
            scenario,
            estimand,
            factor: f64::from_bits(f),
            n,
            coverage: c as f64 / n as f64,
            mean_width: w / n as f64,
        })
        .collect()
}

impl Summary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summaries serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<ResultRecord> {
        vec![
            ResultRecord::new(0, 1.0, "threshold", "apo", (1, 0.5), None, (0.1, 0.7), 0.4, 0.25),
            ResultRecord::new(0, 2.0, "threshold", "capo:x=-0.5", (1, 0.5), None, (0.2, 0.3), 0.4, 0.25),
            ResultRecord::new(1, 1.0, "threshold", "ade", (1, 0.5), Some((0, 0.5)), (0.3, 1.2), 0.9, 1.0 / 3.0),
        ]
    }

    #[test]
    fn csv_round_trip() {
        let recs = sample();
        let text = to_csv_string(&recs).unwrap();
        assert!(text.starts_with(&COLUMNS.join(",")));
        assert_eq!(from_csv_str(&text).unwrap(), recs);
    }

    #[test]
    fn covered_matches_interval() {
        for r in sample() {
            assert_eq!(r.covered, r.lo <= r.truth && r.truth <= r.hi);
        }
    }

    #[test]
    fn summary_coverage_is_mean_of_column() {
        let recs = sample();
        let groups = summarize(&recs);
        for g in &groups {
            let members: Vec<&ResultRecord> = recs
                .iter()
                .filter(|r| r.family() == g.estimand && r.factor == g.factor && r.scenario == g.scenario)
                .collect();
            let cov = members.iter().filter(|r| r.covered).count() as f64 / members.len() as f64;
            assert_eq!(g.coverage, cov);
        }
    }

    #[test]
    fn timing_is_stripped() {
        let a = to_csv_string(&sample()).unwrap();
        let mut recs = sample();
        recs[0].seconds = 99.0;
        let b = to_csv_string(&recs).unwrap();
        assert_ne!(a, b);
        assert_eq!(strip_timing(&a), strip_timing(&b));
    }
}
