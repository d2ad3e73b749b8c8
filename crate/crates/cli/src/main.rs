//! `forecast` — generate scenarios, train, evaluate, predict, dump attention,
//! and run edge-removal ablations.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use forecast_core::ablation::{run_ablation, write_ablation_csv};
use forecast_core::config::Config;
use forecast_core::generator::{generate_synthetic, ScenarioKind};
use forecast_core::graph::{assemble_scene_graph, HeteroGraph};
use forecast_core::metrics::{evaluate, focal_cases, write_metrics_csv, Metrics};
use forecast_core::model::Model;
use forecast_core::nn::Mode;
use forecast_core::scenario::{load_scenario, save_scenario, timestep_layout, Scenario};
use forecast_core::tape::Tape;
use forecast_core::train::{
    load_checkpoint, save_checkpoint, train, write_loss_csv, Regime, CHECKPOINT_SCHEMA_VERSION,
};

fn version_string() -> String {
    format!(
        "{} (scenario schema v{}, checkpoint schema v{})",
        env!("CARGO_PKG_VERSION"),
        forecast_core::scenario::SCHEMA_VERSION,
        CHECKPOINT_SCHEMA_VERSION
    )
}

#[derive(Parser)]
#[command(name = "forecast", about = "Multi-modal motion forecasting pipeline")]
struct Cli {
    /// Worker threads for data-parallel sections (0 = library default,
    /// 1 = fully sequential).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Print the tool and schema versions.
    #[arg(long, short = 'V')]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. `--set d_model=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => Config::default(),
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got '{s}'"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenarios as JSON files.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenarios.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// straight, curve, intersection, or mix.
        #[arg(long, default_value = "mix")]
        kind: String,
        /// Agents per scenario.
        #[arg(long, default_value_t = 3)]
        agents: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a directory of scenario JSON files.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory of scenario JSON files.
        #[arg(long)]
        scenarios: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// none, frozen, or e2e.
        #[arg(long, default_value = "none")]
        regime: String,
        /// Base checkpoint (required for the frozen regime).
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the per-step loss CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a directory of scenarios.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Top-K values to report (repeatable).
        #[arg(long = "k", default_values_t = vec![1, 6])]
        ks: Vec<usize>,
        /// Run the refinement stage.
        #[arg(long)]
        refine: bool,
        /// Metrics CSV output path (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict one scenario and print world-frame trajectories as JSON.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        refine: bool,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump attention weights for one scenario as JSON lines.
    Attention {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train/evaluate with edge families removed and compare metrics.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scenarios: PathBuf,
        /// Held-out directory (defaults to the training scenarios).
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Removal sets: comma-joined relations, ';' between sets, e.g.
        /// "step_to_step;lane_to_step,step_to_lane". The full graph is always
        /// included as the first row.
        #[arg(long, default_value = "")]
        removals: String,
        #[arg(long, default_value = "none")]
        regime: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if cli.version {
        println!("forecast {}", version_string());
        return;
    }
    let Some(command) = cli.command else {
        eprintln!("error: no subcommand given (try --help)");
        std::process::exit(2);
    };
    if let Err(e) = run(command, cli.threads) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_scenario_dir(dir: &Path) -> Result<Vec<Scenario>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no scenario .json files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| load_scenario(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn assemble_all(scenarios: &[Scenario], cfg: &Config) -> Result<Vec<HeteroGraph>> {
    scenarios
        .iter()
        .map(|sc| assemble_scene_graph(sc, cfg).map_err(Into::into))
        .collect()
}

/// Build the model for `cfg` and replace its parameters with a checkpoint,
/// verifying that every expected tensor is present with the right shape.
fn load_model(cfg: &Config, path: &Path) -> Result<Model> {
    let mut model = Model::new(cfg, 0);
    let loaded = load_checkpoint(path)?;
    for (name, t) in &model.store.params {
        let lt = loaded
            .params
            .get(name)
            .with_context(|| format!("checkpoint is missing parameter {name}"))?;
        if lt.shape != t.shape {
            bail!(
                "checkpoint parameter {name} has shape {:?}, configuration expects {:?}",
                lt.shape,
                t.shape
            );
        }
    }
    model.store = loaded;
    Ok(model)
}

fn run(command: Command, threads: usize) -> Result<()> {
    let parallel = threads != 1;
    #[cfg(feature = "parallel")]
    if threads > 1 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().ok();
    }
    match command {
        Command::Generate { cfg, out, count, kind, agents, seed } => {
            let cfg = cfg.build()?;
            let layout = timestep_layout(cfg.rate_hz)?;
            std::fs::create_dir_all(&out)?;
            for i in 0..count {
                let k = match kind.as_str() {
                    "mix" => ScenarioKind::ALL[i % ScenarioKind::ALL.len()],
                    other => ScenarioKind::parse(other)
                        .with_context(|| format!("unknown scenario kind '{other}'"))?,
                };
                let sc = generate_synthetic(k, agents, seed + i as u64, &layout);
                save_scenario(&out.join(format!("scenario_{i:04}.json")), &sc)?;
            }
            println!("wrote {count} scenarios to {}", out.display());
        }
        Command::Train { cfg, scenarios, out, regime, base, seed, loss_csv } => {
            let cfg = cfg.build()?;
            let regime = Regime::parse(&regime)?;
            let graphs = assemble_all(&load_scenario_dir(&scenarios)?, &cfg)?;
            let mut model = Model::new(&cfg, seed);
            match (regime, base) {
                (Regime::Frozen, None) => {
                    bail!("the frozen regime requires --base <checkpoint>")
                }
                (_, Some(p)) => {
                    model = load_model(&cfg, &p)?;
                }
                _ => {}
            }
            let report = train(&mut model, &graphs, regime, parallel)?;
            save_checkpoint(&out, &model.store)?;
            if let Some(p) = loss_csv {
                write_loss_csv(&p, &report.rows)?;
            }
            println!(
                "trained {} steps: loss {} -> {} ({})",
                report.rows.len(),
                report.initial_total(),
                report.final_total(),
                out.display()
            );
        }
        Command::Eval { cfg, scenarios, checkpoint, ks, refine, out } => {
            let cfg = cfg.build()?;
            let model = load_model(&cfg, &checkpoint)?;
            let graphs = assemble_all(&load_scenario_dir(&scenarios)?, &cfg)?;
            let mut cases = Vec::new();
            for g in &graphs {
                let mut tape = Tape::new();
                let fwd = model.forward(&mut tape, g, Mode::Eval, refine)?;
                cases.extend(focal_cases(&tape, g, fwd.final_set()));
            }
            let rows: Vec<Metrics> =
                ks.iter().map(|&k| evaluate(&cases, k)).collect::<forecast_core::Result<_>>()?;
            println!("K,minADE,minFDE,MR,brier_minFDE,n");
            for m in &rows {
                println!(
                    "{},{},{},{},{},{}",
                    m.k, m.min_ade, m.min_fde, m.miss_rate, m.brier_min_fde, m.n
                );
            }
            if let Some(p) = out {
                write_metrics_csv(&p, &rows)?;
            }
        }
        Command::Predict { cfg, scenario, checkpoint, refine, out } => {
            let cfg = cfg.build()?;
            let model = load_model(&cfg, &checkpoint)?;
            let sc = load_scenario(&scenario)?;
            let g = assemble_scene_graph(&sc, &cfg)?;
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &g, Mode::Eval, refine)?;
            let json = serde_json::to_string_pretty(&fwd.predictions)?;
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
        }
        Command::Attention { cfg, scenario, checkpoint, out } => {
            let cfg = cfg.build()?;
            let model = load_model(&cfg, &checkpoint)?;
            let sc = load_scenario(&scenario)?;
            let g = assemble_scene_graph(&sc, &cfg)?;
            let mut tape = Tape::new();
            let fwd = model.forward_opts(&mut tape, &g, Mode::Eval, false, true)?;
            let mut sink: Box<dyn std::io::Write> = match out {
                Some(p) => Box::new(std::fs::File::create(p)?),
                None => Box::new(std::io::stdout().lock()),
            };
            for rec in &fwd.attention {
                writeln!(sink, "{}", serde_json::to_string(rec)?)?;
            }
        }
        Command::Ablate { cfg, scenarios, eval, removals, regime, seed, out } => {
            let cfg = cfg.build()?;
            let regime = Regime::parse(&regime)?;
            let train_sc = load_scenario_dir(&scenarios)?;
            let eval_sc = match eval {
                Some(p) => load_scenario_dir(&p)?,
                None => train_sc.clone(),
            };
            let mut sets = vec![BTreeSet::new()];
            for group in removals.split(';').filter(|s| !s.trim().is_empty()) {
                let mut set = BTreeSet::new();
                for name in group.split(',') {
                    let name = name.trim();
                    let r = forecast_core::graph::Relation::parse(name)
                        .with_context(|| format!("unknown relation '{name}'"))?;
                    set.insert(r);
                }
                sets.push(set);
            }
            let rows = run_ablation(&cfg, &sets, &train_sc, &eval_sc, regime, seed, parallel, Mode::Eval)?;
            write_ablation_csv(&out, &rows)?;
            println!("wrote {} ablation rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}
