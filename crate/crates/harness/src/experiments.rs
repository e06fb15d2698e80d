//! Validity, convergence and width experiments on simulated networks.

use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use netbound::dgp::{outcome_mean, simulate, true_propensity, DgpConfig, EffectKind};
use netbound::estimator::{effect_bounds, estimate_all, TargetEstimate};
use netbound::exposure::{EdgeWeights, ExposureSpec, GRID_TOL};
use netbound::learners::{analytic_count_pmfs, CrossfitData, FnPredictor, Target};
use netbound::netgraph::{gen_barabasi_albert, gen_erdos_renyi, gen_sbm, Graph};
use netbound::oracle::NormalMixture;
use netbound::rng::child_seed;
use netbound::sensitivity::{MisspecKind, MisspecModel};

use crate::config::{ExperimentConfig, ExperimentKind, Generator, Scenario};
use crate::results::{summarize, ResultRecord, Summary};

/// Records plus summary of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<ResultRecord>,
    pub summary: Summary,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let (records, details) = match cfg.experiment.kind {
        ExperimentKind::Validity => {
            let r = run_validity(cfg)?;
            (r.records.clone(), serde_json::to_value(&r.coverage)?)
        }
        ExperimentKind::Convergence => {
            let r = run_convergence(cfg)?;
            (r.records.clone(), serde_json::to_value(&r.errors)?)
        }
        ExperimentKind::Width => {
            let r = run_width(cfg)?;
            (r.records.clone(), serde_json::to_value(&r.stats)?)
        }
    };
    let summary = Summary {
        experiment: format!("{:?}", cfg.experiment.kind).to_lowercase(),
        header: cfg.deviations(),
        groups: summarize(&records),
        details,
    };
    Ok(ExperimentOutput { records, summary })
}

/// Graph for one run; isolated nodes are removed when configured.
pub fn build_graph(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<Graph> {
    let net = &cfg.network;
    let g = match net.generator {
        Generator::ErdosRenyi => gen_erdos_renyi(n, net.p, seed)?,
        Generator::BarabasiAlbert => gen_barabasi_albert(n, net.m, seed)?,
        Generator::Sbm => {
            let k = net.blocks.max(1);
            let sizes: Vec<usize> = (0..k).map(|b| (b + 1) * n / k - b * n / k).collect();
            gen_sbm(n, &sizes, net.p_in, net.p_out, seed)?
        }
    };
    Ok(if net.prune_isolates { g.without_isolates().0 } else { g })
}

/// True and assumed exposure mappings of the scenario.
pub fn mappings(cfg: &ExperimentConfig, g: &Graph, seed: u64) -> Result<(ExposureSpec, ExposureSpec)> {
    Ok(match cfg.experiment.scenario {
        Scenario::WeightedMean => (
            ExposureSpec::WeightedMean(EdgeWeights::perturbed(g, cfg.dgp.eps, seed)?),
            ExposureSpec::Mean,
        ),
        Scenario::Threshold => (
            ExposureSpec::Threshold { c: cfg.dgp.c_true },
            ExposureSpec::Threshold { c: cfg.misspec.c },
        ),
        Scenario::HigherOrder => (
            ExposureSpec::KhopMean {
                radius: cfg.dgp.khop_radius,
            },
            ExposureSpec::Mean,
        ),
    })
}

pub fn misspec_kind(cfg: &ExperimentConfig) -> MisspecKind {
    match cfg.experiment.scenario {
        Scenario::WeightedMean => MisspecKind::WeightedMean {
            eps: cfg.misspec_eps(),
            reading: cfg.misspec.reading,
        },
        Scenario::Threshold => MisspecKind::Threshold {
            eps: cfg.misspec_eps(),
            c: cfg.misspec.c,
        },
        Scenario::HigherOrder => MisspecKind::Msm {
            gamma_minus: cfg.misspec.gamma_minus,
            gamma_plus: cfg.misspec.gamma_plus,
            table: None,
        },
    }
}

fn models(cfg: &ExperimentConfig) -> Result<Vec<MisspecModel>> {
    let kind = misspec_kind(cfg);
    cfg.misspec
        .factors
        .iter()
        .map(|&f| MisspecModel::new(kind.clone(), f).map_err(Into::into))
        .collect()
}

/// Simulated data and fitted bounds of one run at one network size.
struct RunFit {
    graph: Graph,
    data: netbound::dgp::Dataset,
    beta: Vec<f64>,
    assumed: ExposureSpec,
    estimates: Vec<TargetEstimate>,
    targets: Vec<Target>,
    models: Vec<MisspecModel>,
    seconds: f64,
}

fn fit_run(cfg: &ExperimentConfig, n: usize, run: usize, capo: bool) -> Result<RunFit> {
    let start = Instant::now();
    let seed = child_seed(cfg.experiment.seed, run as u64);
    let g = build_graph(cfg, n, child_seed(seed, 0))?;
    let (spec_true, spec_assumed) = mappings(cfg, &g, child_seed(seed, 1))?;
    let mut dgp = DgpConfig::new(cfg.experiment.d, spec_true, spec_assumed.clone(), child_seed(seed, 2));
    dgp.outcome = cfg.dgp.outcome();
    let data = simulate(&dgp, &g)?;
    let models = models(cfg)?;
    let targets: Vec<Target> = cfg.estimation.targets.iter().map(|&t| t.into()).collect();
    let cf = cfg.crossfit(child_seed(seed, 3));
    let second = cfg.second_stage(child_seed(seed, 4));
    let input = CrossfitData {
        x: &data.x,
        t: &data.t,
        z: &data.z_assumed.values,
        y: &data.y,
        network: Some((&g, &spec_assumed)),
    };
    let (estimates, _) = estimate_all(input, &models, &targets, &cf, capo.then_some(&second))
        .with_context(|| format!("run {run}, n = {n}"))?;
    Ok(RunFit {
        graph: g,
        beta: dgp.beta_t.clone(),
        data,
        assumed: spec_assumed,
        estimates,
        targets,
        models,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn apo_truth(cfg: &ExperimentConfig, fit: &RunFit, est: &TargetEstimate) -> f64 {
    let p = cfg.dgp.outcome();
    let tg = est.pseudo.target;
    est.pseudo
        .rows
        .iter()
        .map(|&i| outcome_mean(&p, tg.t, tg.z, fit.data.x.row(i)))
        .sum::<f64>()
        / est.pseudo.rows.len() as f64
}

/// Coverage of one factor in the validity experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorCoverage {
    pub factor: f64,
    pub capo_coverage: f64,
    pub apo_coverage: f64,
    pub apo_ci_coverage: f64,
    pub mean_capo_width: f64,
}

#[derive(Debug, Clone)]
pub struct ValidityReport {
    pub records: Vec<ResultRecord>,
    pub coverage: Vec<FactorCoverage>,
}

/// CAPO and APO bounds across factors; coverage of the analytic truth.
pub fn run_validity(cfg: &ExperimentConfig) -> Result<ValidityReport> {
    if cfg.experiment.scenario == Scenario::HigherOrder {
        bail!("the validity experiment needs the weighted_mean or threshold scenario");
    }
    let n = cfg.experiment.n_nodes[0];
    let grid = cfg.x_grid();
    let scenario = cfg.experiment.scenario.name();
    let p = cfg.dgp.outcome();
    let per_run: Vec<Vec<ResultRecord>> = (0..cfg.experiment.runs)
        .into_par_iter()
        .map(|run| -> Result<Vec<ResultRecord>> {
            let fit = fit_run(cfg, n, run, !grid.is_empty())?;
            let mut out = Vec::new();
            let nt = fit.targets.len();
            for (mi, model) in fit.models.iter().enumerate() {
                for (ti, tg) in fit.targets.iter().enumerate() {
                    let est = &fit.estimates[mi * nt + ti];
                    let a = (tg.t, tg.z);
                    let truth = apo_truth(cfg, &fit, est);
                    let f = model.factor;
                    out.push(ResultRecord::new(run, f, scenario, "apo", a, None, (est.apo.lo, est.apo.hi), truth, fit.seconds));
                    out.push(ResultRecord::new(run, f, scenario, "apo_ci", a, None, est.apo.outer(), truth, fit.seconds));
                    if let Some(capo) = &est.capo {
                        for x in &grid {
                            let (lo, hi, _) = capo.eval(x);
                            let truth = outcome_mean(&p, tg.t, tg.z, x);
                            let name = format!("capo:x={}", x[0]);
                            out.push(ResultRecord::new(run, f, scenario, name, a, None, (lo, hi), truth, fit.seconds));
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let records: Vec<ResultRecord> = per_run.into_iter().flatten().collect();
    let coverage = cfg
        .misspec
        .factors
        .iter()
        .map(|&f| {
            let share = |fam: &str| {
                let sel: Vec<&ResultRecord> = records.iter().filter(|r| r.factor == f && r.family() == fam).collect();
                let cov = sel.iter().filter(|r| r.covered).count() as f64 / sel.len().max(1) as f64;
                let width = sel.iter().map(|r| r.width).sum::<f64>() / sel.len().max(1) as f64;
                (cov, width)
            };
            FactorCoverage {
                factor: f,
                capo_coverage: share("capo").0,
                apo_coverage: share("apo").0,
                apo_ci_coverage: share("apo_ci").0,
                mean_capo_width: share("capo").1,
            }
        })
        .collect();
    Ok(ValidityReport { records, coverage })
}

/// Absolute errors of both estimators against the oracle bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceError {
    pub run: usize,
    pub n: usize,
    pub mae_orthogonal: f64,
    pub mae_plugin: f64,
    pub coverage_orthogonal: f64,
    pub coverage_plugin: f64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub records: Vec<ResultRecord>,
    pub errors: Vec<ConvergenceError>,
}

/// Oracle APO bounds `(lo, hi)` of the threshold scenario: node-wise sharp
/// bounds from the true count distributions and the true conditional
/// outcome mixture, averaged over nodes.
pub fn threshold_oracle(
    cfg: &ExperimentConfig,
    g: &Graph,
    x: &netbound::dgp::Covariates,
    beta: &[f64],
    assumed: &ExposureSpec,
    model: &MisspecModel,
    target: Target,
) -> Result<(f64, f64)> {
    let (c, c_true) = match assumed {
        ExposureSpec::Threshold { c } => (*c, cfg.dgp.c_true),
        _ => bail!("threshold oracle needs a threshold mapping"),
    };
    let truth = FnPredictor(|r: &[f64]| true_propensity(r, beta));
    let pmfs = analytic_count_pmfs(g, assumed, x, &truth)?;
    let p = cfg.dgp.outcome();
    let (mut lo, mut hi) = (0.0, 0.0);
    for (i, pmf) in pmfs.iter().enumerate() {
        let n = (pmf.len() - 1) as f64;
        let (mut w1, mut w0) = (0.0, 0.0);
        for (k, &pk) in pmf.iter().enumerate() {
            let share = k as f64 / n;
            let za = f64::from(u8::from(share >= c - GRID_TOL));
            if (za - target.z).abs() > GRID_TOL {
                continue;
            }
            if share >= c_true - GRID_TOL {
                w1 += pk;
            } else {
                w0 += pk;
            }
        }
        let xi = x.row(i);
        let mix = NormalMixture {
            weights: vec![w1 / (w0 + w1), w0 / (w0 + w1)],
            means: vec![outcome_mean(&p, target.t, 1.0, xi), outcome_mean(&p, target.t, 0.0, xi)],
            sd: p.noise_sd,
        };
        let b = model.bounds_at(target.z, xi, Some(pmf))?;
        let (l, h) = mix.sharp_bounds(b.b_minus, b.b_plus);
        lo += l;
        hi += h;
    }
    let n = pmfs.len() as f64;
    Ok((lo / n, hi / n))
}

/// Orthogonal versus plug-in APO bounds against oracle sharp bounds over a
/// grid of network sizes.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    if cfg.experiment.scenario != Scenario::Threshold {
        bail!("the convergence experiment needs the threshold scenario");
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.experiment.runs)
        .flat_map(|r| cfg.experiment.n_nodes.iter().map(move |&n| (r, n)))
        .collect();
    let results: Vec<(Vec<ResultRecord>, Vec<ConvergenceError>)> = jobs
        .par_iter()
        .map(|&(run, n)| -> Result<_> {
            let fit = fit_run(cfg, n, run, false)?;
            let scenario = format!("{}/n={n}", cfg.experiment.scenario.name());
            let nt = fit.targets.len();
            let mut recs = Vec::new();
            let mut errs = Vec::new();
            for (mi, model) in fit.models.iter().enumerate() {
                let (mut e_o, mut e_p, mut c_o, mut c_p) = (0.0, 0.0, 0usize, 0usize);
                for (ti, tg) in fit.targets.iter().enumerate() {
                    let est = &fit.estimates[mi * nt + ti];
                    let oracle = threshold_oracle(cfg, &fit.graph, &fit.data.x, &fit.beta, &fit.assumed, model, *tg)?;
                    let truth = apo_truth(cfg, &fit, est);
                    let a = (tg.t, tg.z);
                    let f = model.factor;
                    let s = fit.seconds;
                    let orth = ResultRecord::new(run, f, &scenario, "apo_orthogonal", a, None, (est.apo.lo, est.apo.hi), truth, s);
                    let plug = ResultRecord::new(run, f, &scenario, "apo_plugin", a, None, (est.plugin.lo, est.plugin.hi), truth, s);
                    e_o += (est.apo.lo - oracle.0).abs() + (est.apo.hi - oracle.1).abs();
                    e_p += (est.plugin.lo - oracle.0).abs() + (est.plugin.hi - oracle.1).abs();
                    let ci = ResultRecord::new(run, f, &scenario, "apo_orthogonal_ci", a, None, est.apo.outer(), truth, s);
                    let pci = ResultRecord::new(run, f, &scenario, "apo_plugin_ci", a, None, est.plugin.outer(), truth, s);
                    c_o += usize::from(ci.covered);
                    c_p += usize::from(pci.covered);
                    recs.extend([
                        orth,
                        plug,
                        ci,
                        pci,
                        ResultRecord::new(run, f, &scenario, "oracle", a, None, oracle, truth, s),
                    ]);
                }
                let k = fit.targets.len() as f64;
                errs.push(ConvergenceError {
                    run,
                    n,
                    mae_orthogonal: e_o / (2.0 * k),
                    mae_plugin: e_p / (2.0 * k),
                    coverage_orthogonal: c_o as f64 / k,
                    coverage_plugin: c_p as f64 / k,
                });
            }
            Ok((recs, errs))
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (r, e) in results {
        records.extend(r);
        errors.extend(e);
    }
    Ok(ConvergenceReport { records, errors })
}

/// Width statistics of direct-effect intervals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WidthStats {
    pub factor: f64,
    pub mean_relative_width: f64,
    pub share_excluding_zero: f64,
    pub intervals: usize,
}

#[derive(Debug, Clone)]
pub struct WidthReport {
    pub records: Vec<ResultRecord>,
    pub stats: Vec<WidthStats>,
    /// Relative width of every direct-effect interval, in record order.
    pub relative_widths: Vec<f64>,
}

/// Direct-effect bounds under msm bounds, as a share of the outcome range.
pub fn run_width(cfg: &ExperimentConfig) -> Result<WidthReport> {
    let n = cfg.experiment.n_nodes[0];
    let scenario = cfg.experiment.scenario.name();
    let p = cfg.dgp.outcome();
    let per_run: Vec<Vec<(ResultRecord, f64)>> = (0..cfg.experiment.runs)
        .into_par_iter()
        .map(|run| -> Result<_> {
            let fit = fit_run(cfg, n, run, false)?;
            let range = fit.data.y.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - fit.data.y.iter().copied().fold(f64::INFINITY, f64::min);
            let nt = fit.targets.len();
            let mut out = Vec::new();
            for (mi, model) in fit.models.iter().enumerate() {
                let f = model.factor;
                for (ti, tg) in fit.targets.iter().enumerate() {
                    let est = &fit.estimates[mi * nt + ti];
                    let truth = apo_truth(cfg, &fit, est);
                    let rec = ResultRecord::new(run, f, scenario, "apo", (tg.t, tg.z), None, (est.apo.lo, est.apo.hi), truth, fit.seconds);
                    out.push((rec, f64::NAN));
                }
                for (ti, tg) in fit.targets.iter().enumerate() {
                    if tg.t != 1 {
                        continue;
                    }
                    let Some(tj) = fit.targets.iter().position(|o| o.t == 0 && (o.z - tg.z).abs() < GRID_TOL) else {
                        continue;
                    };
                    let a = &fit.estimates[mi * nt + ti];
                    let b = &fit.estimates[mi * nt + tj];
                    let e = effect_bounds(EffectKind::Direct, &a.pseudo, &b.pseudo)?;
                    let truth = p.tau + p.gamma * tg.z;
                    let rec = ResultRecord::new(run, f, scenario, "ade", (1, tg.z), Some((0, tg.z)), (e.lo, e.hi), truth, fit.seconds);
                    let rel = rec.width / range;
                    out.push((rec, rel));
                    let ci = (e.ci_lo[0], e.ci_hi[1]);
                    let rec = ResultRecord::new(run, f, scenario, "ade_ci", (1, tg.z), Some((0, tg.z)), ci, truth, fit.seconds);
                    out.push((rec, f64::NAN));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let flat: Vec<(ResultRecord, f64)> = per_run.into_iter().flatten().collect();
    let stats = cfg
        .misspec
        .factors
        .iter()
        .map(|&f| {
            let sel: Vec<&(ResultRecord, f64)> = flat.iter().filter(|(r, _)| r.factor == f && r.estimand == "ade").collect();
            let k = sel.len().max(1) as f64;
            WidthStats {
                factor: f,
                mean_relative_width: sel.iter().map(|(_, w)| w).sum::<f64>() / k,
                share_excluding_zero: sel.iter().filter(|(r, _)| r.lo > 0.0 || r.hi < 0.0).count() as f64 / k,
                intervals: sel.len(),
            }
        })
        .collect();
    let relative_widths = flat.iter().filter(|(r, _)| r.estimand == "ade").map(|(_, w)| *w).collect();
    Ok(WidthReport {
        records: flat.into_iter().map(|(r, _)| r).collect(),
        stats,
        relative_widths,
    })
}
