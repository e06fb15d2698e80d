//! `netbound` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use netbound::dgp::{simulate, Dataset, DgpConfig, EffectKind};
use netbound::estimator::{bound_result, effect_bounds, estimate_all};
use netbound::exposure::GRID_TOL;
use netbound::learners::{CrossfitData, Target};
use netbound::netgraph::Graph;
use netbound::sensitivity::MisspecModel;
use netbound_harness::config::{ExperimentConfig, ExperimentKind};
use netbound_harness::experiments::{build_graph, mappings, misspec_kind, run_experiment};
use netbound_harness::results::{to_csv_string, Summary};
use netbound_harness::studies::three_way_agreement;

#[derive(Parser)]
#[command(name = "netbound", version, about = "Sharp bounds under misspecified network exposure mappings")]
struct Cli {
    /// Worker threads (falls back to NETBOUND_WORKERS, then all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Generates a network and writes it as an edge list.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulates covariates, treatments, exposures and outcomes on a network.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Edge list; generated from the config when absent.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimates bounds for every factor and target of the config.
    Estimate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs a validity, convergence or width experiment.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Output path of the records; the summary goes next to it as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Checks closed-form bounds against the variational scan and the tilted distribution.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Prints the version.
    Version,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(ExperimentKind::Validity),
    };
    if let Some(s) = seed {
        cfg.experiment.seed = s;
    }
    Ok(cfg)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn graph_for(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Graph> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            Ok(Graph::from_edge_list(&text)?)
        }
        None => build_graph(cfg, cfg.experiment.n_nodes[0], cfg.experiment.seed),
    }
}

fn simulate_cmd(cfg: &ExperimentConfig, graph: Option<&Path>) -> Result<Dataset> {
    let g = graph_for(cfg, graph)?;
    let (spec_true, spec_assumed) = mappings(cfg, &g, cfg.experiment.seed)?;
    let mut dgp = DgpConfig::new(cfg.experiment.d, spec_true, spec_assumed, cfg.experiment.seed);
    dgp.outcome = cfg.dgp.outcome();
    Ok(simulate(&dgp, &g)?)
}

fn estimate_cmd(cfg: &ExperimentConfig, graph: &Path, data: &Path) -> Result<String> {
    let g = graph_for(cfg, Some(graph))?;
    let (_, assumed) = mappings(cfg, &g, cfg.experiment.seed)?;
    let text = std::fs::read_to_string(data).with_context(|| format!("cannot read {}", data.display()))?;
    let ds = Dataset::from_csv(&text, assumed.support_kind())?;
    if ds.len() != g.node_count() {
        bail!("data has {} rows but the graph has {} nodes", ds.len(), g.node_count());
    }
    let models: Vec<MisspecModel> = cfg
        .misspec
        .factors
        .iter()
        .map(|&f| MisspecModel::new(misspec_kind(cfg), f))
        .collect::<netbound::Result<_>>()?;
    let targets: Vec<Target> = cfg.estimation.targets.iter().map(|&t| t.into()).collect();
    let input = CrossfitData {
        x: &ds.x,
        t: &ds.t,
        z: &ds.z_assumed.values,
        y: &ds.y,
        network: Some((&g, &assumed)),
    };
    let cf = cfg.crossfit(cfg.experiment.seed);
    let second = cfg.second_stage(cfg.experiment.seed);
    let (est, _) = estimate_all(input, &models, &targets, &cf, Some(&second))?;
    let grid = cfg.x_grid();
    let nt = targets.len();
    let mut results = Vec::new();
    for (mi, model) in models.iter().enumerate() {
        for (ti, tg) in targets.iter().enumerate() {
            let a = &est[mi * nt + ti];
            let mut effects = Vec::new();
            for (tj, other) in targets.iter().enumerate() {
                if tj == ti {
                    continue;
                }
                let kind = if (other.z - tg.z).abs() < GRID_TOL && other.t != tg.t {
                    EffectKind::Direct
                } else if other.t == tg.t {
                    EffectKind::Spillover
                } else {
                    EffectKind::Overall
                };
                effects.push(effect_bounds(kind, &a.pseudo, &est[mi * nt + tj].pseudo)?);
            }
            results.push(bound_result(a, model, effects, &grid, cfg.estimation.clip));
        }
    }
    Ok(serde_json::to_string_pretty(&results)? + "\n")
}

fn experiment_cmd(cfg: &ExperimentConfig, out: Option<&Path>, format: Format) -> Result<()> {
    for line in cfg.deviations() {
        eprintln!("# deviation: {line}");
    }
    let output = run_experiment(cfg)?;
    let default = match format {
        Format::Csv => "results.csv",
        Format::Json => "results.json",
    };
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(default));
    let body = match format {
        Format::Csv => to_csv_string(&output.records)?,
        Format::Json => serde_json::to_string_pretty(&output.records)? + "\n",
    };
    std::fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))?;
    let summary_path = summary_path(&path);
    std::fs::write(&summary_path, summary_text(&output.summary))
        .with_context(|| format!("cannot write {}", summary_path.display()))?;
    eprintln!("wrote {} records to {}", output.records.len(), path.display());
    Ok(())
}

fn summary_path(records: &Path) -> PathBuf {
    let stem = records.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    records.with_file_name(format!("{stem}.summary.json"))
}

fn summary_text(s: &Summary) -> String {
    s.to_json() + "\n"
}

fn run(cli: Cli) -> Result<()> {
    let workers = match cli.workers {
        Some(w) => Some(w),
        None => match std::env::var("NETBOUND_WORKERS") {
            Ok(v) => Some(v.parse().context("NETBOUND_WORKERS must be a positive integer")?),
            Err(_) => None,
        },
    };
    if let Some(w) = workers {
        if w == 0 {
            bail!("worker count must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global()?;
    }
    match cli.command {
        Command::Generate { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let g = graph_for(&cfg, None)?;
            emit(&g.to_edge_list(), out.as_deref())
        }
        Command::Simulate {
            config,
            graph,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let ds = simulate_cmd(&cfg, graph.as_deref())?;
            emit(&ds.to_csv(), out.as_deref())
        }
        Command::Estimate {
            config,
            graph,
            data,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            emit(&estimate_cmd(&cfg, &graph, &data)?, out.as_deref())
        }
        Command::Experiment {
            config,
            out,
            seed,
            format,
        } => {
            let cfg = load_config(Some(&config), seed)?;
            experiment_cmd(&cfg, out.as_deref(), format)
        }
        Command::OracleCheck { instances, seed } => {
            let a = three_way_agreement(instances, seed)?;
            println!("max deviation {:e} over {} instances", a.max_deviation, a.instances);
            if a.max_deviation < 1e-6 {
                Ok(())
            } else {
                bail!("oracle agreement failed: {:e} >= 1e-6", a.max_deviation)
            }
        }
        Command::Version => {
            println!("netbound {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
