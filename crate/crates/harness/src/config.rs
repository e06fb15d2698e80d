//! Experiment configuration: sectioned `key = value` files or JSON.
//!
//! Both formats deserialize into [`ExperimentConfig`]. Keys that are absent
//! take the preset of the experiment kind named in `[experiment] kind`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ini::Ini;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Number, Value};

use netbound::dgp::OutcomeParams;
use netbound::estimator::{KernelShape, KernelSpec, Localization};
use netbound::learners::{CrossfitConfig, ExposureMode, LearnerKind, LearnerSpec, Target};
use netbound::sensitivity::WeightedMeanReading;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Validity,
    Convergence,
    Width,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// True mapping: perturbed weighted mean; assumed: plain mean.
    WeightedMean,
    /// True threshold `c*`; assumed threshold `c`.
    Threshold,
    /// True mapping: k-hop mean; assumed: plain mean; msm bounds.
    HigherOrder,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::WeightedMean => "weighted_mean",
            Scenario::Threshold => "threshold",
            Scenario::HigherOrder => "higher_order",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    ErdosRenyi,
    BarabasiAlbert,
    Sbm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub scenario: Scenario,
    #[serde(deserialize_with = "one_or_many")]
    pub n_nodes: Vec<usize>,
    pub d: usize,
    pub runs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub generator: Generator,
    /// Edge probability of the Erdos-Renyi generator.
    pub p: f64,
    /// Edges per new node of the Barabasi-Albert generator.
    pub m: usize,
    /// Number of equal-size blocks of the block model.
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub prune_isolates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSection {
    pub tau: f64,
    pub delta: f64,
    pub gamma: f64,
    pub noise_sd: f64,
    /// Weight slack of the true weighted-mean mapping.
    pub eps: f64,
    /// True threshold level.
    pub c_true: f64,
    /// Radius of the true k-hop mapping.
    pub khop_radius: usize,
}

impl DgpSection {
    pub fn outcome(&self) -> OutcomeParams {
        OutcomeParams {
            tau: self.tau,
            delta: self.delta,
            gamma: self.gamma,
            noise_sd: self.noise_sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisspecSection {
    #[serde(deserialize_with = "one_or_many")]
    pub factors: Vec<f64>,
    /// Declared slack; defaults to the true one (`dgp.eps` or `|c - c_true|`).
    pub eps: Option<f64>,
    /// Assumed threshold level.
    pub c: f64,
    pub gamma_minus: f64,
    pub gamma_plus: f64,
    pub reading: WeightedMeanReading,
}

/// Estimation target written as `"t:z"` or `{ "t": .., "z": .. }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TargetSpec {
    pub t: u8,
    pub z: f64,
}

impl From<TargetSpec> for Target {
    fn from(s: TargetSpec) -> Self {
        Target { t: s.t, z: s.z }
    }
}

impl<'de> Deserialize<'de> for TargetSpec {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Object { t: u8, z: f64 },
        }
        match Repr::deserialize(de)? {
            Repr::Object { t, z } => Ok(TargetSpec { t, z }),
            Repr::Text(s) => {
                let (t, z) = s
                    .split_once(':')
                    .ok_or_else(|| serde::de::Error::custom(format!("target {s:?} is not \"t:z\"")))?;
                let t = t.trim().parse().map_err(serde::de::Error::custom)?;
                let z = parse_fraction(z.trim()).ok_or_else(|| serde::de::Error::custom(format!("bad exposure {z:?}")))?;
                Ok(TargetSpec { t, z })
            }
        }
    }
}

/// Parses `0.5` or `1/3`.
fn parse_fraction(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((a, b)) => Some(a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?),
        None => s.parse().ok(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSection {
    pub folds: usize,
    pub clip: f64,
    pub level_clip: f64,
    #[serde(deserialize_with = "one_or_many")]
    pub targets: Vec<TargetSpec>,
    /// Points of the first-covariate grid on which CAPO bounds are reported.
    pub grid_points: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub learner: LearnerKind,
    pub trees: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
    pub bins: usize,
    pub subsample: f64,
    pub second_stage: LearnerKind,
    pub second_stage_degree: usize,
    pub exposure_mode: ExposureMode,
    /// Kernel bandwidth; only used with continuous exposures.
    pub bandwidth: Option<f64>,
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub network: NetworkSection,
    pub dgp: DgpSection,
    pub misspec: MisspecSection,
    pub estimation: EstimationSection,
}

fn one_or_many<'de, D, T>(de: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany<T> {
        Many(Vec<T>),
        One(T),
    }
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::Many(v) => v,
        OneOrMany::One(v) => vec![v],
    })
}

/// Simulation-table values that the header compares against.
const TABLE_TAU: f64 = 0.8;
const TABLE_DELTA: f64 = 0.6;
const TABLE_GAMMA: f64 = 0.2;
const TABLE_NOISE_SD: f64 = 1.0;
const TABLE_EPS: f64 = 0.03;
const TABLE_C_TRUE: f64 = 0.45;
const TABLE_FOLDS: usize = 5;
const TABLE_RUNS: usize = 20;
const TABLE_SIZES: [usize; 2] = [3000, 6000];

impl ExperimentConfig {
    /// Defaults of an experiment kind.
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = Self {
            experiment: ExperimentSection {
                kind,
                scenario: Scenario::WeightedMean,
                n_nodes: vec![1000],
                d: 1,
                runs: 10,
                seed: 1,
            },
            network: NetworkSection {
                generator: Generator::ErdosRenyi,
                p: 0.006,
                m: 4,
                blocks: 4,
                p_in: 0.01,
                p_out: 0.0007,
                prune_isolates: true,
            },
            dgp: DgpSection {
                tau: TABLE_TAU,
                delta: TABLE_DELTA,
                gamma: TABLE_GAMMA,
                noise_sd: TABLE_NOISE_SD,
                eps: TABLE_EPS,
                c_true: TABLE_C_TRUE,
                khop_radius: 2,
            },
            misspec: MisspecSection {
                factors: vec![0.5, 1.0, 2.0],
                eps: None,
                c: 0.5,
                gamma_minus: 0.8,
                gamma_plus: 1.25,
                reading: WeightedMeanReading::NonEmpty,
            },
            estimation: EstimationSection {
                folds: TABLE_FOLDS,
                clip: 0.01,
                level_clip: 0.005,
                targets: vec![TargetSpec { t: 1, z: 0.5 }, TargetSpec { t: 0, z: 0.5 }],
                grid_points: 19,
                grid_lo: -0.9,
                grid_hi: 0.9,
                learner: LearnerKind::Gbdt,
                trees: 100,
                depth: 3,
                learning_rate: 0.05,
                min_leaf: 50,
                bins: 32,
                subsample: 0.8,
                second_stage: LearnerKind::Poly,
                second_stage_degree: 3,
                exposure_mode: ExposureMode::Analytic,
                bandwidth: None,
            },
        };
        match kind {
            ExperimentKind::Validity => base,
            ExperimentKind::Convergence => Self {
                experiment: ExperimentSection {
                    scenario: Scenario::Threshold,
                    n_nodes: vec![500, 1000, 2000, 4000],
                    d: 6,
                    ..base.experiment
                },
                network: NetworkSection {
                    generator: Generator::BarabasiAlbert,
                    ..base.network
                },
                misspec: MisspecSection {
                    factors: vec![1.0],
                    ..base.misspec
                },
                estimation: EstimationSection {
                    targets: vec![
                        TargetSpec { t: 1, z: 1.0 },
                        TargetSpec { t: 0, z: 1.0 },
                        TargetSpec { t: 1, z: 0.0 },
                        TargetSpec { t: 0, z: 0.0 },
                    ],
                    grid_points: 0,
                    ..base.estimation
                },
                ..base
            },
            ExperimentKind::Width => Self {
                experiment: ExperimentSection {
                    scenario: Scenario::HigherOrder,
                    n_nodes: vec![3000],
                    ..base.experiment
                },
                network: NetworkSection {
                    generator: Generator::Sbm,
                    ..base.network
                },
                misspec: MisspecSection {
                    factors: vec![1.0],
                    ..base.misspec
                },
                estimation: EstimationSection {
                    targets: [1.0 / 3.0, 0.5, 2.0 / 3.0]
                        .iter()
                        .flat_map(|&z| [TargetSpec { t: 1, z }, TargetSpec { t: 0, z }])
                        .collect(),
                    grid_points: 0,
                    ..base.estimation
                },
                ..base
            },
        }
    }

    /// Parses JSON or sectioned text, filling gaps from the kind's preset.
    pub fn parse(text: &str) -> Result<Self> {
        let value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).context("config is not valid JSON")?
        } else {
            ini_to_json(text)?
        };
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    fn from_value(value: Value) -> Result<Self> {
        let Value::Object(user) = value else {
            bail!("config must be a table of sections");
        };
        let kind: ExperimentKind = match user.get("experiment").and_then(|e| e.get("kind")) {
            Some(k) => serde_json::from_value(k.clone()).context("experiment.kind")?,
            None => bail!("missing [experiment] kind"),
        };
        let mut merged = serde_json::to_value(Self::preset(kind))?;
        for (section, entries) in user {
            let Value::Object(entries) = entries else {
                bail!("section {section} must contain key = value pairs");
            };
            let slot = merged
                .get_mut(&section)
                .and_then(Value::as_object_mut)
                .with_context(|| format!("unknown section [{section}]"))?;
            for (k, v) in entries {
                if !slot.contains_key(&k) {
                    bail!("unknown key {k} in [{section}]");
                }
                slot.insert(k, v);
            }
        }
        let cfg: Self = serde_json::from_value(merged).context("config values have the wrong type")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if self.misspec.factors.is_empty() {
            bail!("factor list is empty");
        }
        if self.misspec.factors.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
            bail!("factors must be finite and nonnegative");
        }
        if e.runs == 0 {
            bail!("runs must be at least 1");
        }
        if e.n_nodes.is_empty() || e.n_nodes.iter().any(|&n| n < 10) {
            bail!("n_nodes must list sizes of at least 10");
        }
        if e.d == 0 {
            bail!("d must be positive");
        }
        if self.estimation.targets.is_empty() {
            bail!("no estimation targets");
        }
        if self.estimation.targets.iter().any(|t| t.t > 1) {
            bail!("treatments are binary");
        }
        Ok(())
    }

    /// Declared slack of the misspecification model.
    pub fn misspec_eps(&self) -> f64 {
        self.misspec.eps.unwrap_or(match self.experiment.scenario {
            Scenario::Threshold => (self.misspec.c - self.dgp.c_true).abs(),
            _ => self.dgp.eps,
        })
    }

    pub fn first_stage(&self, seed: u64) -> LearnerSpec {
        let e = &self.estimation;
        LearnerSpec {
            kind: e.learner,
            depth: e.depth,
            trees: e.trees,
            learning_rate: e.learning_rate,
            bins: e.bins,
            min_leaf: e.min_leaf,
            subsample: e.subsample,
            degree: e.second_stage_degree,
            seed,
        }
    }

    pub fn second_stage(&self, seed: u64) -> LearnerSpec {
        LearnerSpec {
            kind: self.estimation.second_stage,
            ..self.first_stage(seed)
        }
    }

    pub fn crossfit(&self, seed: u64) -> CrossfitConfig {
        let learner = self.first_stage(seed);
        CrossfitConfig {
            folds: self.estimation.folds,
            seed,
            clip: self.estimation.clip,
            level_clip: self.estimation.level_clip,
            localization: match self.estimation.bandwidth {
                Some(h) => Localization::Kernel(KernelSpec {
                    shape: KernelShape::Epanechnikov,
                    bandwidth: h,
                }),
                None => Localization::Discrete,
            },
            exposure_mode: self.estimation.exposure_mode,
            propensity: learner,
            quantile: learner,
            regression: learner,
            exposure: learner,
            ..CrossfitConfig::default()
        }
    }

    /// First-covariate grid for CAPO reports; other coordinates are zero.
    pub fn x_grid(&self) -> Vec<Vec<f64>> {
        let e = &self.estimation;
        let k = e.grid_points;
        (0..k)
            .map(|i| {
                let mut x = vec![0.0; self.experiment.d];
                x[0] = if k == 1 {
                    0.5 * (e.grid_lo + e.grid_hi)
                } else {
                    e.grid_lo + (e.grid_hi - e.grid_lo) * i as f64 / (k - 1) as f64
                };
                // Snap to 1e-9 so labels like 0.3 do not print as 0.30000000000000016.
                x[0] = (x[0] * 1e9).round() / 1e9;
                x
            })
            .collect()
    }

    /// Human-readable differences from the simulation-table defaults.
    pub fn deviations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, value: f64, table: f64| {
            if (value - table).abs() > 1e-12 {
                out.push(format!("{name} = {value} (table value {table})"));
            }
        };
        check("dgp.tau", self.dgp.tau, TABLE_TAU);
        check("dgp.delta", self.dgp.delta, TABLE_DELTA);
        check("dgp.gamma", self.dgp.gamma, TABLE_GAMMA);
        check("dgp.noise_sd", self.dgp.noise_sd, TABLE_NOISE_SD);
        check("dgp.eps", self.dgp.eps, TABLE_EPS);
        check("dgp.c_true", self.dgp.c_true, TABLE_C_TRUE);
        check("estimation.folds", self.estimation.folds as f64, TABLE_FOLDS as f64);
        check("experiment.runs", self.experiment.runs as f64, TABLE_RUNS as f64);
        let off: Vec<String> = self
            .experiment
            .n_nodes
            .iter()
            .filter(|n| !TABLE_SIZES.contains(n))
            .map(ToString::to_string)
            .collect();
        if !off.is_empty() {
            out.push(format!("n_nodes {} (table sizes 3000/6000)", off.join(",")));
        }
        if self.experiment.scenario == Scenario::HigherOrder {
            out.push(format!(
                "msm bounds {}/{} are not table values",
                self.misspec.gamma_minus, self.misspec.gamma_plus
            ));
        }
        if self.experiment.d > 1 {
            out.push(format!(
                "propensity coefficients 0.8/sqrt(d) with d = {}",
                self.experiment.d
            ));
        }
        if self.experiment.scenario == Scenario::Threshold {
            out.push(format!("assumed threshold c = {} is not a table value", self.misspec.c));
        }
        out
    }
}

/// Converts sectioned text into nested JSON with scalar coercion: integers,
/// floats, booleans, comma-separated lists, otherwise strings.
fn ini_to_json(text: &str) -> Result<Value> {
    let ini = Ini::load_from_str(text).context("malformed config text")?;
    let mut root = Map::new();
    for (section, props) in ini.iter() {
        let Some(section) = section else {
            if props.iter().next().is_some() {
                bail!("keys must appear inside a [section]");
            }
            continue;
        };
        let mut entries = Map::new();
        for (k, v) in props.iter() {
            entries.insert(k.to_string(), coerce(v));
        }
        root.insert(section.to_string(), Value::Object(entries));
    }
    Ok(Value::Object(root))
}

fn coerce(raw: &str) -> Value {
    let raw = raw.trim();
    if raw.contains(',') {
        return Value::Array(raw.split(',').map(|p| coerce(p.trim())).filter(|v| *v != Value::Null).collect());
    }
    if raw.is_empty() {
        return Value::Null;
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Value::Number(i.into());
    }
    if let Ok(f) = raw.parse::<f64>() {
        if let Some(n) = Number::from_f64(f) {
            return Value::Number(n);
        }
    }
    match raw {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(raw.to_string()),
    }
}
