//! `graphnad`: command-line front end for the backdoor attack and defense pipeline.
//!
//! Every subcommand reads one JSON experiment config (defaults when omitted), applies the
//! override flags and derives all randomness from a single seed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use graphnad::dataset::write_tu_dataset;
use graphnad::experiment::{
    apply_defense, export_attention, measure, prepare, replay_metrics, run_experiment, train_models, DatasetSource,
    DefenseKind, ExperimentConfig, ARTIFACT_BACKDOORED, ARTIFACT_CLEAN_REFERENCE, ARTIFACT_DEFENDED, ARTIFACT_POISON_REPORT,
};
use graphnad::gnn::Checkpoint;
use graphnad::Arch;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "graphnad", version, about = "Subgraph backdoors on graph classifiers and their purification")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// JSON experiment config; defaults are used for anything it leaves out.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stage. `run` replaces the seed list with this one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_defense)]
    defense: Option<DefenseKind>,
    #[arg(long, global = true, value_parser = parse_arch)]
    arch: Option<Arch>,
    /// Read a TUDataset corpus from this directory instead of the configured source.
    #[arg(long, global = true, requires = "dataset_name")]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset_name: Option<String>,
    /// Size of the synthetic corpus.
    #[arg(long, global = true, conflicts_with = "dataset")]
    num_graphs: Option<usize>,
    #[arg(long, global = true)]
    injection_ratio: Option<f64>,
    #[arg(long, global = true)]
    trigger_size: Option<f64>,
    /// Clean holdout as a fraction of the corpus.
    #[arg(long, global = true)]
    holding_rate: Option<f64>,
    /// Epochs of backdoored training.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    distill_epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured corpus in TUDataset format.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Poison the training split and write the poisoned and triggered sets.
    Poison {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backdoored model (and the clean reference if enabled).
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the selected defense to a backdoored checkpoint.
    Defend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// ASR and ACC of a checkpoint under the selected defense.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-layer attention of one evaluation graph as JSON plus DOT.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the triggered evaluation set (or the clean one with `--clean`).
        #[arg(long, default_value_t = 0)]
        graph: usize,
        #[arg(long)]
        clean: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline over every seed and sweep point, writing results.csv and results.json.
    Run {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Problems with the configuration or the command line (exit code 1).
#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn parse_defense(s: &str) -> Result<DefenseKind, String> {
    s.parse().map_err(|e: graphnad::Error| e.to_string())
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown architecture `{s}` (gin or gcn)"))
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?,
            None => ExperimentConfig::default(),
        };
        if let (Some(path), Some(name)) = (&self.dataset, &self.dataset_name) {
            c.dataset = DatasetSource::Tu { path: path.clone(), name: name.clone() };
        }
        if let Some(n) = self.num_graphs {
            match &mut c.dataset {
                DatasetSource::Synthetic { num_graphs, .. } => *num_graphs = n,
                DatasetSource::Tu { .. } => return Err(config_error("--num-graphs needs a synthetic dataset")),
            }
        }
        if let Some(kind) = self.defense {
            c.defense_kind = kind;
        }
        if let Some(arch) = self.arch {
            c.model.arch = arch;
        }
        if let Some(v) = self.injection_ratio {
            c.trigger.injection_ratio = v;
        }
        if let Some(v) = self.trigger_size {
            c.trigger.trigger_size = v;
        }
        if let Some(v) = self.holding_rate {
            c.split.clean_holdout_fraction = v;
        }
        if let Some(v) = self.epochs {
            c.backdoor_training.epochs = v;
        }
        if let Some(v) = self.distill_epochs {
            c.defense.distill_epochs = v;
        }
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        c.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(c)
    }
}

fn single_seed(config: &ExperimentConfig) -> Result<(u64, ExperimentConfig)> {
    let seed = *config
        .seeds
        .first()
        .ok_or_else(|| config_error("no seed given: pass --seed or list one in the config"))?;
    Ok((seed, config.with_seed(seed)))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.overrides.load()?;
    let dataset = || config.load_dataset().context("loading dataset");
    match cli.command {
        Command::Synth { out } => {
            let ds = dataset()?;
            write_tu_dataset(&ds, &out)?;
            print_json(&json!({
                "name": ds.name,
                "graphs": ds.len(),
                "class_counts": ds.class_counts(),
                "avg_nodes": ds.avg_nodes(),
                "directory": out,
            }))
        }
        Command::Poison { out } => {
            let (seed, point) = single_seed(&config)?;
            let prep = prepare(&point, &dataset()?)?;
            fs::create_dir_all(&out)?;
            write_json(&out.join(ARTIFACT_POISON_REPORT), &prep.report)?;
            write_tu_dataset(&prep.poisoned, out.join("poisoned"))?;
            write_tu_dataset(&prep.triggered.dataset, out.join("triggered"))?;
            print_json(&json!({
                "seed": seed,
                "poisoned": prep.report.poisoned_indices.len(),
                "skipped_too_small": prep.report.skipped_too_small.len(),
                "trigger_nodes": prep.report.trigger.num_nodes(),
                "triggered_test_graphs": prep.triggered.dataset.len(),
            }))
        }
        Command::Train { out } => {
            let (seed, point) = single_seed(&config)?;
            let prep = prepare(&point, &dataset()?)?;
            let models = train_models(&point, &prep)?;
            fs::create_dir_all(&out)?;
            Checkpoint::new(prep.config.clone(), models.backdoored.clone())?.save(out.join(ARTIFACT_BACKDOORED))?;
            let mut report = json!({
                "seed": seed,
                "backdoored": measure(DefenseKind::None, &point, &prep, &models.backdoored)?,
            });
            if let Some(clean) = &models.clean_reference {
                Checkpoint::new(prep.config.clone(), clean.clone())?.save(out.join(ARTIFACT_CLEAN_REFERENCE))?;
                report["clean_reference"] = json!(measure(DefenseKind::None, &point, &prep, clean)?);
            }
            print_json(&report)
        }
        Command::Defend { checkpoint, out } => {
            let (seed, point) = single_seed(&config)?;
            let backdoored = load_checkpoint(&checkpoint)?;
            let prep = prepare(&point, &dataset()?)?;
            if backdoored.config != prep.config {
                return Err(config_error("checkpoint architecture does not match the config"));
            }
            let kind = point.defense_kind;
            let result = apply_defense(kind, &point, &prep, &backdoored.params)?;
            fs::create_dir_all(&out)?;
            Checkpoint::new(prep.config.clone(), result.params.clone())?.save(out.join(ARTIFACT_DEFENDED))?;
            write_json(&out.join("defense_log.json"), &result.log)?;
            print_json(&json!({
                "seed": seed,
                "defense": kind.name(),
                "before": measure(DefenseKind::None, &point, &prep, &backdoored.params)?,
                "after": measure(kind, &point, &prep, &result.params)?,
            }))
        }
        Command::Eval { checkpoint } => {
            let (seed, _) = single_seed(&config)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let metrics = replay_metrics(&config, seed, &dataset()?, config.defense_kind, &ckpt)?;
            print_json(&json!({ "seed": seed, "defense": config.defense_kind.name(), "metrics": metrics }))
        }
        Command::ExportAttention { checkpoint, graph, clean, out } => {
            let (_, point) = single_seed(&config)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let prep = prepare(&point, &dataset()?)?;
            let pool = if clean { &prep.split.evaluation } else { &prep.triggered.dataset };
            let g = pool
                .graphs
                .get(graph)
                .ok_or_else(|| config_error(format!("graph index {graph} out of range ({} graphs)", pool.len())))?;
            let export = export_attention(&ckpt.params, &ckpt.config, g, point.defense.p, &out)?;
            let mut report = json!({ "json": out, "dot": out.with_extension("dot"), "nodes": export.nodes });
            if !clean {
                report["trigger_nodes"] = json!(prep.triggered.assignments[graph]);
            }
            print_json(&report)
        }
        Command::Run { out } => {
            let mut config = config;
            if out.is_some() {
                config.output_dir = out;
            }
            let report = run_experiment(&config)?;
            let failed: Vec<_> = report.runs.iter().filter_map(|r| r.row.error.as_ref()).collect();
            print_json(&json!({ "summaries": report.summaries, "failed_runs": failed }))?;
            if failed.len() == report.runs.len() {
                return Err(anyhow!("every run failed; first error: {}", failed[0]));
            }
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.is::<ConfigError>() || matches!(e.downcast_ref::<graphnad::Error>(), Some(graphnad::Error::Config(_)))
    });
    if config {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
