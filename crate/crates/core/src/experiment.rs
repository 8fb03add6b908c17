//! End-to-end experiment runner.
//!
//! One run is: load or synthesize the corpus, split it, poison the training portion,
//! train the backdoored (and optionally a clean reference) model, apply the selected
//! defense and measure ASR and ACC. A config is expanded over its sweep values and seeds,
//! runs execute in parallel, and the results land in `results.csv` and `results.json`
//! together with per-run checkpoints and poison reports.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    apply_trigger_to_test, make_er_trigger, optimize_trigger_features, poison_with_trigger, FeatureMode,
    PoisonReport, TriggerOptimization, TriggerSpec, TriggeredSet,
};
use crate::baselines::{
    finetune_only, plain_predictions, prune_dataset, smoothed_predictions, vanilla_distill, PruneConfig,
    SmoothingConfig,
};
use crate::dataset::{load_tu_dataset, split, synth_dataset, Dataset, DatasetSplit, SplitSpec};
use crate::defense::{
    attention_map, finetune_teacher, graphnad_defend_logged, normalize_attention, DefenseConfig,
    DefenseEpochLog, DefenseProbe, LayerPairs,
};
use crate::error::{Error, Result};
use crate::gnn::{forward, init_params, train, Arch, Checkpoint, GnnConfig, LossSpec, ModelParams, TrainConfig};
use crate::graph::Graph;
use crate::metrics::{asr_from_predictions, ConfusionMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic { num_graphs: usize, seed: u64 },
    Tu { path: PathBuf, name: String },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            num_graphs: 400,
            seed: 1,
        }
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic { num_graphs, seed } => synth_dataset(*num_graphs, *seed),
            DatasetSource::Tu { path, name } => load_tu_dataset(path, name),
        }
    }
}

/// Architecture of the models trained by the harness; input width and class count come
/// from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub arch: Arch,
    pub num_layers: usize,
    pub hidden_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            arch: Arch::Gin,
            num_layers: 3,
            hidden_dim: 16,
        }
    }
}

impl ModelSpec {
    pub fn config(&self, dataset: &Dataset, seed: u64) -> GnnConfig {
        GnnConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            ..GnnConfig::new(self.arch, dataset.feature_dim, dataset.num_classes, seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    Graphnad,
    Finetune,
    VanillaDistill,
    Prune,
    Rs,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 6] = [
        DefenseKind::None,
        DefenseKind::Graphnad,
        DefenseKind::Finetune,
        DefenseKind::VanillaDistill,
        DefenseKind::Prune,
        DefenseKind::Rs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Graphnad => "graphnad",
            DefenseKind::Finetune => "finetune",
            DefenseKind::VanillaDistill => "vanilla_distill",
            DefenseKind::Prune => "prune",
            DefenseKind::Rs => "rs",
        }
    }
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DefenseKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown defense `{s}`")))
    }
}

/// One swept parameter and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum Sweep {
    InjectionRatio(Vec<f64>),
    TriggerSize(Vec<f64>),
    HoldingRate(Vec<f64>),
    P(Vec<f64>),
    Pairs(Vec<LayerPairs>),
    BetaGamma(Vec<(f64, f64)>),
}

impl Sweep {
    pub fn axis(&self) -> &'static str {
        match self {
            Sweep::InjectionRatio(_) => "injection_ratio",
            Sweep::TriggerSize(_) => "trigger_size",
            Sweep::HoldingRate(_) => "holding_rate",
            Sweep::P(_) => "p",
            Sweep::Pairs(_) => "pairs",
            Sweep::BetaGamma(_) => "beta_gamma",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Sweep::InjectionRatio(v) | Sweep::TriggerSize(v) | Sweep::HoldingRate(v) | Sweep::P(v) => v.len(),
            Sweep::Pairs(v) => v.len(),
            Sweep::BetaGamma(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `i`-th sweep point as a label and a concrete config.
    fn point(&self, i: usize, base: &ExperimentConfig) -> (String, ExperimentConfig) {
        let mut c = base.clone();
        c.sweep = None;
        let label = match self {
            Sweep::InjectionRatio(v) => {
                c.trigger.injection_ratio = v[i];
                v[i].to_string()
            }
            Sweep::TriggerSize(v) => {
                c.trigger.trigger_size = v[i];
                v[i].to_string()
            }
            Sweep::HoldingRate(v) => {
                c.split.clean_holdout_fraction = v[i];
                v[i].to_string()
            }
            Sweep::P(v) => {
                c.defense.p = v[i];
                v[i].to_string()
            }
            Sweep::Pairs(v) => {
                c.defense.pairs = v[i].clone();
                serde_json::to_string(&v[i]).unwrap_or_default()
            }
            Sweep::BetaGamma(v) => {
                (c.defense.beta, c.defense.gamma) = v[i];
                format!("{}/{}", v[i].0, v[i].1)
            }
        };
        (label, c)
    }

    fn validate(&self, num_layers: usize) -> Result<()> {
        let check = |ok: bool, what: String| if ok { Ok(()) } else { Err(Error::Config(what)) };
        if self.is_empty() {
            return Err(Error::Config(format!("sweep over {} has no values", self.axis())));
        }
        match self {
            Sweep::InjectionRatio(v) | Sweep::TriggerSize(v) => v
                .iter()
                .try_for_each(|&x| check(x > 0.0 && x <= 1.0, format!("{} value {x} not in (0, 1]", self.axis()))),
            Sweep::HoldingRate(v) => v
                .iter()
                .try_for_each(|&x| check(x > 0.0 && x < 1.0, format!("holding rate {x} not in (0, 1)"))),
            Sweep::P(v) => v.iter().try_for_each(|&x| check(x >= 1.0, format!("p = {x} must be >= 1"))),
            Sweep::Pairs(v) => v.iter().try_for_each(|p| p.resolve(num_layers).map(drop)),
            Sweep::BetaGamma(v) => v.iter().try_for_each(|&(b, g)| {
                check(b >= 0.0 && g >= 0.0, format!("beta/gamma ({b}, {g}) must be non-negative"))
            }),
        }
    }
}

/// Attacker-side settings for `feature_mode = optimized` triggers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerOptimizationConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Penalise attention drift against a fine-tuned copy (an adaptive attack on the
    /// defense).
    pub adaptive: bool,
    pub adaptive_weight: f64,
}

impl Default for TriggerOptimizationConfig {
    fn default() -> Self {
        TriggerOptimizationConfig {
            steps: 20,
            step_size: 0.1,
            adaptive: false,
            adaptive_weight: 1.0,
        }
    }
}

/// A complete experiment description; mirrors the JSON config file field for field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub model: ModelSpec,
    pub trigger: TriggerSpec,
    pub trigger_optimization: TriggerOptimizationConfig,
    /// Training of the backdoored model and of the clean reference.
    pub backdoor_training: TrainConfig,
    pub split: SplitSpec,
    pub defense: DefenseConfig,
    pub defense_kind: DefenseKind,
    pub prune: PruneConfig,
    pub smoothing: SmoothingConfig,
    pub distill_temperature: f64,
    /// Also train a model on the unpoisoned training set.
    pub clean_reference: bool,
    /// Graphs larger than this are dropped on load.
    pub max_nodes: Option<usize>,
    pub sweep: Option<Sweep>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::default(),
            model: ModelSpec::default(),
            trigger: TriggerSpec::default(),
            trigger_optimization: TriggerOptimizationConfig::default(),
            backdoor_training: TrainConfig {
                epochs: 300,
                batch_size: 16,
                learning_rate: 0.01,
                seed: 0,
                grad_clip: Some(1.0),
            },
            split: SplitSpec::default(),
            defense: DefenseConfig::desk_scale(),
            defense_kind: DefenseKind::Graphnad,
            prune: PruneConfig::default(),
            smoothing: SmoothingConfig::default(),
            distill_temperature: 2.0,
            clean_reference: true,
            max_nodes: Some(crate::graph::DEFAULT_MAX_NODES),
            sweep: None,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks everything that can be checked without loading the data.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.model.num_layers < 2 || self.model.hidden_dim == 0 {
            return Err(Error::Config("model needs >= 2 layers and a positive width".into()));
        }
        let t = &self.trigger;
        if !(t.trigger_size > 0.0 && t.trigger_size <= 1.0)
            || !(0.0..=1.0).contains(&t.injection_ratio)
            || !(0.0..=1.0).contains(&t.er_edge_prob)
        {
            return Err(Error::Config(format!("invalid trigger spec {t:?}")));
        }
        self.backdoor_training.validate()?;
        self.defense.validate()?;
        self.defense.pairs.resolve(self.model.num_layers)?;
        self.smoothing.validate()?;
        if !(-1.0..=1.0).contains(&self.prune.cosine_threshold) {
            return Err(Error::Config("prune threshold must lie in [-1, 1]".into()));
        }
        if !(self.distill_temperature > 0.0) {
            return Err(Error::Config("distill_temperature must be positive".into()));
        }
        for (name, f) in [
            ("train_fraction", self.split.train_fraction),
            ("clean_holdout_fraction", self.split.clean_holdout_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} = {f} must lie in (0, 1)")));
            }
        }
        if let Some(s) = &self.sweep {
            s.validate(self.model.num_layers)?;
        }
        Ok(())
    }

    /// The config with every random stream tied to `seed`.
    pub fn with_seed(&self, seed: u64) -> ExperimentConfig {
        let mut c = self.clone();
        c.trigger.seed = seed;
        c.split.seed = seed;
        c.backdoor_training.seed = seed;
        c.defense.seed = seed;
        c.smoothing.seed = seed;
        c.seeds = vec![seed];
        c
    }

    /// Sweep points (label and concrete config); a single unlabelled point without sweep.
    pub fn points(&self) -> Vec<(Option<String>, ExperimentConfig)> {
        match &self.sweep {
            None => vec![(None, self.clone())],
            Some(s) => (0..s.len())
                .map(|i| {
                    let (label, c) = s.point(i, self);
                    (Some(label), c)
                })
                .collect(),
        }
    }

    /// Short hash of everything but the seeds and the output location.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.output_dir = None;
        let text = serde_json::to_string(&c).unwrap_or_default();
        Sha256::digest(text.as_bytes())
            .iter()
            .take(6)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut ds = self.dataset.load()?;
        if let Some(max) = self.max_nodes {
            ds.drop_oversized(max);
        }
        Ok(ds)
    }
}

/// Data and attack artifacts of one seeded run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: GnnConfig,
    pub trigger_spec: TriggerSpec,
    pub split: DatasetSplit,
    pub poisoned: Dataset,
    pub report: PoisonReport,
    /// Triggered copies of the non-target evaluation graphs.
    pub triggered: TriggeredSet,
}

/// Splits, builds the trigger (optimizing its features when asked) and poisons.
/// `point` must already be seeded (see [`ExperimentConfig::with_seed`]).
pub fn prepare(point: &ExperimentConfig, dataset: &Dataset) -> Result<Prepared> {
    let seed = point.split.seed;
    let config = point.model.config(dataset, seed);
    config.validate()?;
    let spec = point.trigger.clone();
    spec.validate(dataset.num_classes)?;
    let split = split(dataset, &point.split)?;
    let mut trigger = make_er_trigger(&spec, dataset.avg_nodes(), dataset.feature_dim)?;
    let (mut poisoned, mut report) = poison_with_trigger(&split.train, &spec, &trigger)?;

    if spec.feature_mode == FeatureMode::Optimized {
        let opt = &point.trigger_optimization;
        let surrogate = train(
            &init_params(&config)?,
            &config,
            &poisoned,
            &point.backdoor_training,
            &LossSpec::cross_entropy(),
        )?;
        let clean_part: Vec<usize> = (0..split.train.len())
            .filter(|i| report.poisoned_indices.binary_search(i).is_err())
            .take(split.clean_holdout.len().max(1))
            .collect();
        let teacher = if opt.adaptive {
            let clean = split.train.subset(&clean_part);
            Some(finetune_teacher(&surrogate, &config, &clean, &point.defense)?)
        } else {
            None
        };
        let hosts: Vec<Graph> = split
            .train
            .graphs
            .iter()
            .filter(|g| g.label() != spec.target_label)
            .cloned()
            .collect();
        let options = TriggerOptimization {
            steps: opt.steps,
            step_size: opt.step_size,
            adaptive: opt.adaptive,
            teacher: teacher.as_ref(),
            adaptive_weight: opt.adaptive_weight,
            p: point.defense.p,
        };
        trigger = optimize_trigger_features(&surrogate, &config, &trigger, &spec, &hosts, &options)?.0;
        (poisoned, report) = poison_with_trigger(&split.train, &spec, &trigger)?;
    }
    let triggered = apply_trigger_to_test(&split.evaluation, &report, &spec)?;
    Ok(Prepared {
        config,
        trigger_spec: spec,
        split,
        poisoned,
        report,
        triggered,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub backdoored: ModelParams,
    pub clean_reference: Option<ModelParams>,
}

/// Trains the backdoored model on the poisoned set and, if configured, a clean reference
/// from the same initialization.
pub fn train_models(point: &ExperimentConfig, prep: &Prepared) -> Result<TrainedModels> {
    let init = init_params(&prep.config)?;
    let ce = LossSpec::cross_entropy();
    let backdoored = train(&init, &prep.config, &prep.poisoned, &point.backdoor_training, &ce)?;
    let clean_reference = point
        .clean_reference
        .then(|| train(&init, &prep.config, &prep.split.train, &point.backdoor_training, &ce))
        .transpose()?;
    Ok(TrainedModels {
        backdoored,
        clean_reference,
    })
}

#[derive(Debug, Clone)]
pub struct DefenseResult {
    pub params: ModelParams,
    pub log: Vec<DefenseEpochLog>,
}

/// Applies `kind` to the backdoored model. Prune and smoothing act at inference time and
/// leave the weights untouched.
pub fn apply_defense(
    kind: DefenseKind,
    point: &ExperimentConfig,
    prep: &Prepared,
    backdoored: &ModelParams,
) -> Result<DefenseResult> {
    let cfg = &prep.config;
    let d = &point.defense;
    let clean = &prep.split.clean_holdout;
    let budget = TrainConfig {
        epochs: d.distill_epochs,
        batch_size: d.batch_size,
        learning_rate: d.learning_rate,
        seed: d.seed,
        grad_clip: d.grad_clip,
    };
    let unchanged = || DefenseResult {
        params: backdoored.clone(),
        log: Vec::new(),
    };
    Ok(match kind {
        DefenseKind::None | DefenseKind::Prune | DefenseKind::Rs => unchanged(),
        DefenseKind::Graphnad => {
            let probe = DefenseProbe {
                clean: &prep.split.evaluation,
                triggered: &prep.triggered.dataset,
                target_label: prep.trigger_spec.target_label,
            };
            let out = graphnad_defend_logged(backdoored, cfg, clean, d, Some(probe))?;
            DefenseResult {
                params: out.purified,
                log: out.log,
            }
        }
        DefenseKind::Finetune => DefenseResult {
            params: finetune_only(backdoored, cfg, clean, &budget)?,
            log: Vec::new(),
        },
        DefenseKind::VanillaDistill => {
            let teacher = finetune_teacher(backdoored, cfg, clean, d)?;
            DefenseResult {
                params: vanilla_distill(backdoored, &teacher, cfg, clean, &budget, point.distill_temperature)?,
                log: Vec::new(),
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` when there are no triggered graphs to attack.
    pub asr: Option<f64>,
    pub acc: f64,
    pub per_class_acc: Vec<Option<f64>>,
}

fn predictions_under(
    kind: DefenseKind,
    point: &ExperimentConfig,
    params: &ModelParams,
    config: &GnnConfig,
    dataset: &Dataset,
) -> Result<Vec<usize>> {
    match kind {
        DefenseKind::Prune => plain_predictions(params, config, &prune_dataset(dataset, &point.prune)?),
        DefenseKind::Rs => smoothed_predictions(params, config, dataset, &point.smoothing),
        _ => plain_predictions(params, config, dataset),
    }
}

/// ASR on the triggered evaluation graphs and ACC on the clean evaluation graphs (test
/// minus holdout), predicting the way `kind` does.
pub fn measure(kind: DefenseKind, point: &ExperimentConfig, prep: &Prepared, params: &ModelParams) -> Result<Metrics> {
    let eval = &prep.split.evaluation;
    if eval.is_empty() {
        return Err(Error::Empty("no evaluation graphs left after the holdout"));
    }
    let predicted = predictions_under(kind, point, params, &prep.config, eval)?;
    let cm = ConfusionMatrix::from_pairs(
        eval.num_classes,
        eval.graphs.iter().map(Graph::label).zip(predicted),
    )?;
    let triggered = predictions_under(kind, point, params, &prep.config, &prep.triggered.dataset)?;
    Ok(Metrics {
        asr: asr_from_predictions(&triggered, prep.trigger_spec.target_label),
        acc: cm.accuracy(),
        per_class_acc: cm.per_class_accuracy(),
    })
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub fingerprint: String,
    pub sweep_axis: Option<String>,
    pub sweep_value: Option<String>,
    pub defense: DefenseKind,
    pub seed: u64,
    pub asr: Option<f64>,
    pub acc: Option<f64>,
    pub per_class_acc: Vec<Option<f64>>,
    /// Backdoored model before any defense.
    pub asr_before: Option<f64>,
    pub acc_before: Option<f64>,
    pub acc_clean_reference: Option<f64>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub row: ResultRow,
    pub defense_log: Vec<DefenseEpochLog>,
    /// Directory with this run's checkpoints and poison report.
    pub artifacts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub fingerprint: String,
    pub sweep_axis: Option<String>,
    pub sweep_value: Option<String>,
    pub defense: DefenseKind,
    /// Runs without errors (and, for ASR, with a defined rate).
    pub runs: usize,
    pub asr_mean: Option<f64>,
    pub asr_std: Option<f64>,
    pub asr_median: Option<f64>,
    pub acc_mean: Option<f64>,
    pub acc_std: Option<f64>,
    pub acc_median: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metadata: serde_json::Value,
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
    pub summaries: Vec<Summary>,
}

pub const ARTIFACT_POISON_REPORT: &str = "poison_report.json";
pub const ARTIFACT_BACKDOORED: &str = "backdoored.json";
pub const ARTIFACT_DEFENDED: &str = "defended.json";
pub const ARTIFACT_CLEAN_REFERENCE: &str = "clean_reference.json";
pub const ARTIFACT_RUN_CONFIG: &str = "config.json";

fn run_dir(root: &Path, fingerprint: &str, seed: u64) -> PathBuf {
    root.join("runs").join(format!("{fingerprint}-seed{seed}"))
}

/// Full pipeline for one sweep point and seed. Failures become an error row.
pub fn run_single(
    point: &ExperimentConfig,
    sweep_value: Option<String>,
    seed: u64,
    dataset: &Dataset,
    output: Option<&Path>,
) -> RunRecord {
    let start = Instant::now();
    let fingerprint = point.fingerprint();
    let mut row = ResultRow {
        fingerprint: fingerprint.clone(),
        sweep_axis: None,
        sweep_value,
        defense: point.defense_kind,
        seed,
        asr: None,
        acc: None,
        per_class_acc: Vec::new(),
        asr_before: None,
        acc_before: None,
        acc_clean_reference: None,
        wall_time_s: 0.0,
        error: None,
    };
    let mut log = Vec::new();
    let dir = output.map(|root| run_dir(root, &fingerprint, seed));
    let outcome = (|| -> Result<()> {
        let seeded = point.with_seed(seed);
        let prep = prepare(&seeded, dataset)?;
        let models = train_models(&seeded, &prep)?;
        let before = measure(DefenseKind::None, &seeded, &prep, &models.backdoored)?;
        row.asr_before = before.asr;
        row.acc_before = Some(before.acc);
        if let Some(reference) = &models.clean_reference {
            row.acc_clean_reference = Some(measure(DefenseKind::None, &seeded, &prep, reference)?.acc);
        }
        let defended = apply_defense(point.defense_kind, &seeded, &prep, &models.backdoored)?;
        let after = measure(point.defense_kind, &seeded, &prep, &defended.params)?;
        row.asr = after.asr;
        row.acc = Some(after.acc);
        row.per_class_acc = after.per_class_acc;
        log = defended.log;
        if let Some(dir) = &dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(ARTIFACT_RUN_CONFIG), seeded.to_json()?)?;
            fs::write(dir.join(ARTIFACT_POISON_REPORT), prep.report.to_json()?)?;
            Checkpoint::new(prep.config.clone(), models.backdoored)?.save(dir.join(ARTIFACT_BACKDOORED))?;
            Checkpoint::new(prep.config.clone(), defended.params)?.save(dir.join(ARTIFACT_DEFENDED))?;
            if let Some(reference) = models.clean_reference {
                Checkpoint::new(prep.config.clone(), reference)?.save(dir.join(ARTIFACT_CLEAN_REFERENCE))?;
            }
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        row.error = Some(e.to_string());
    }
    row.wall_time_s = start.elapsed().as_secs_f64();
    RunRecord {
        row,
        defense_log: log,
        artifacts: dir,
    }
}

/// Recomputes a run's metrics from a saved checkpoint (the data side is rebuilt from the
/// seeded config).
pub fn replay_metrics(
    point: &ExperimentConfig,
    seed: u64,
    dataset: &Dataset,
    kind: DefenseKind,
    checkpoint: &Checkpoint,
) -> Result<Metrics> {
    let seeded = point.with_seed(seed);
    let prep = prepare(&seeded, dataset)?;
    if checkpoint.config != prep.config {
        return Err(Error::Config("checkpoint config does not match the experiment".into()));
    }
    measure(kind, &seeded, &prep, &checkpoint.params)
}

fn mean_std_median(values: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std), Some(median(values)))
}

/// Median (mean of the two middle values for even counts).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn summarize(runs: &[RunRecord]) -> Vec<Summary> {
    let mut keys: Vec<(String, Option<String>, Option<String>, DefenseKind)> = Vec::new();
    for r in runs {
        let k = (
            r.row.fingerprint.clone(),
            r.row.sweep_axis.clone(),
            r.row.sweep_value.clone(),
            r.row.defense,
        );
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(fingerprint, sweep_axis, sweep_value, defense)| {
            let ok: Vec<&ResultRow> = runs
                .iter()
                .map(|r| &r.row)
                .filter(|r| r.fingerprint == fingerprint && r.error.is_none())
                .collect();
            let asr: Vec<f64> = ok.iter().filter_map(|r| r.asr).collect();
            let acc: Vec<f64> = ok.iter().filter_map(|r| r.acc).collect();
            let (asr_mean, asr_std, asr_median) = mean_std_median(&asr);
            let (acc_mean, acc_std, acc_median) = mean_std_median(&acc);
            Summary {
                fingerprint,
                sweep_axis,
                sweep_value,
                defense,
                runs: ok.len(),
                asr_mean,
                asr_std,
                asr_median,
                acc_mean,
                acc_std,
                acc_median,
            }
        })
        .collect()
}

/// Column order of `results.csv`.
pub const CSV_HEADER: [&str; 14] = [
    "row_kind",
    "fingerprint",
    "sweep_axis",
    "sweep_value",
    "defense",
    "seed",
    "asr",
    "acc",
    "asr_before",
    "acc_before",
    "acc_clean_reference",
    "per_class_acc",
    "wall_time_s",
    "error",
];

/// Written in place of an ASR with no eligible graphs.
pub const UNDEFINED: &str = "undefined";

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn write_csv(path: &Path, runs: &[RunRecord], summaries: &[Summary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in runs {
        let row = &r.row;
        let failed = row.error.is_some();
        let asr = |v: Option<f64>, defined: bool| match v {
            Some(x) => x.to_string(),
            None if defined && !failed => UNDEFINED.to_string(),
            None => String::new(),
        };
        let per_class = row
            .per_class_acc
            .iter()
            .map(|v| v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string()))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            "run".to_string(),
            row.fingerprint.clone(),
            row.sweep_axis.clone().unwrap_or_default(),
            row.sweep_value.clone().unwrap_or_default(),
            row.defense.to_string(),
            row.seed.to_string(),
            asr(row.asr, row.acc.is_some()),
            opt_num(row.acc),
            asr(row.asr_before, row.acc_before.is_some()),
            opt_num(row.acc_before),
            opt_num(row.acc_clean_reference),
            per_class,
            row.wall_time_s.to_string(),
            row.error.clone().unwrap_or_default(),
        ])?;
    }
    for s in summaries {
        for (kind, asr, acc) in [("mean", s.asr_mean, s.acc_mean), ("std", s.asr_std, s.acc_std)] {
            w.write_record([
                kind.to_string(),
                s.fingerprint.clone(),
                s.sweep_axis.clone().unwrap_or_default(),
                s.sweep_value.clone().unwrap_or_default(),
                s.defense.to_string(),
                String::new(),
                asr.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string()),
                opt_num(acc),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs every (sweep point, seed) pair in parallel, then writes `results.csv`,
/// `results.json` and per-run artifacts when an output directory is configured.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let axis = config.sweep.as_ref().map(|s| s.axis().to_string());
    let output = config.output_dir.as_deref();
    if let Some(dir) = output {
        fs::create_dir_all(dir)?;
    }
    let jobs: Vec<(Option<String>, ExperimentConfig, u64)> = config
        .points()
        .into_iter()
        .flat_map(|(label, point)| config.seeds.iter().map(move |&s| (label.clone(), point.clone(), s)))
        .collect();
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|(label, point, seed)| {
            let mut rec = run_single(point, label.clone(), *seed, &dataset, output);
            rec.row.sweep_axis = axis.clone();
            rec
        })
        .collect();
    let summaries = summarize(&runs);
    let report = ExperimentReport {
        metadata: serde_json::json!({
            "acc_population": "test_minus_holdout",
            "asr_population": "triggered_non_target_evaluation_graphs",
            "dataset": dataset.name,
            "graphs": dataset.len(),
            "avg_nodes": dataset.avg_nodes(),
        }),
        config: config.clone(),
        runs,
        summaries,
    };
    if let Some(dir) = output {
        write_csv(&dir.join("results.csv"), &report.runs, &report.summaries)?;
        fs::write(dir.join("results.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// Per-layer normalized attention of one graph, as written by [`export_attention`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub p: f64,
    /// `layers[l][v]`: normalized score of node `v` at layer `l + 1`.
    pub layers: Vec<Vec<f64>>,
}

pub fn attention_scores(params: &ModelParams, config: &GnnConfig, graph: &Graph, p: f64) -> Result<AttentionExport> {
    let trace = forward(params, config, graph)?;
    let degrees = graph.degree();
    let layers = trace
        .layers
        .iter()
        .map(|f| Ok(normalize_attention(&attention_map(f.view(), &degrees, p)?).0.to_vec()))
        .collect::<Result<_>>()?;
    Ok(AttentionExport {
        nodes: graph.num_nodes(),
        edges: graph.edges().to_vec(),
        p,
        layers,
    })
}

impl AttentionExport {
    pub fn to_dot(&self) -> String {
        let mut out = String::from("graph attention {\n");
        for v in 0..self.nodes {
            let attrs: Vec<String> = self
                .layers
                .iter()
                .enumerate()
                .map(|(l, s)| format!("layer{}={:?}", l + 1, s[v]))
                .collect();
            out.push_str(&format!("  {v} [{}];\n", attrs.join(", ")));
        }
        for &(a, b) in &self.edges {
            out.push_str(&format!("  {a} -- {b};\n"));
        }
        out.push_str("}\n");
        out
    }
}

/// Writes the attention JSON to `output` and a DOT rendering next to it (`.dot`).
pub fn export_attention(
    params: &ModelParams,
    config: &GnnConfig,
    graph: &Graph,
    p: f64,
    output: impl AsRef<Path>,
) -> Result<AttentionExport> {
    let output = output.as_ref();
    let export = attention_scores(params, config, graph, p)?;
    fs::write(output, serde_json::to_string_pretty(&export)?)?;
    fs::write(output.with_extension("dot"), export.to_dot())?;
    Ok(export)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defense_names_round_trip() {
        for k in DefenseKind::ALL {
            assert_eq!(k.name().parse::<DefenseKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("nad".parse::<DefenseKind>().is_err());
    }

    #[test]
    fn config_json_round_trip_and_partial_files() {
        let c = ExperimentConfig {
            sweep: Some(Sweep::BetaGamma(vec![(1.0, 0.0), (0.0, 0.0)])),
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        let partial = ExperimentConfig::from_json(r#"{"defense_kind": "prune", "seeds": [3]}"#).unwrap();
        assert_eq!(partial.defense_kind, DefenseKind::Prune);
        assert_eq!(partial.seeds, vec![3]);
        assert_eq!(partial.model, ModelSpec::default());
    }

    #[test]
    fn sweep_points_and_validation() {
        let c = ExperimentConfig {
            sweep: Some(Sweep::HoldingRate(vec![0.01, 0.03, 0.05, 0.1])),
            ..Default::default()
        };
        c.validate().unwrap();
        let pts = c.points();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[3].1.split.clean_holdout_fraction, 0.1);
        assert_eq!(pts[0].0.as_deref(), Some("0.01"));
        let fps: std::collections::BTreeSet<_> = pts.iter().map(|(_, p)| p.fingerprint()).collect();
        assert_eq!(fps.len(), 4);

        for bad in [
            Sweep::HoldingRate(vec![1.5]),
            Sweep::P(vec![0.5]),
            Sweep::InjectionRatio(vec![]),
            Sweep::Pairs(vec![LayerPairs::Offset(5)]),
            Sweep::BetaGamma(vec![(-1.0, 0.0)]),
        ] {
            let c = ExperimentConfig { sweep: Some(bad), ..Default::default() };
            assert!(c.validate().is_err());
        }
        assert!(ExperimentConfig { seeds: vec![], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn fingerprint_ignores_seeds_and_output() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seeds: vec![9],
            output_dir: Some("/tmp/x".into()),
            ..Default::default()
        };
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = ExperimentConfig { defense_kind: DefenseKind::Rs, ..Default::default() };
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let (m, s, _) = mean_std_median(&[1.0, 3.0]);
        assert_eq!((m, s), (Some(2.0), Some(2f64.sqrt())));
        assert_eq!(mean_std_median(&[]), (None, None, None));
    }

    #[test]
    fn single_node_attention_export() {
        let cfg = GnnConfig::new(Arch::Gin, 2, 2, 0);
        let p = init_params(&cfg).unwrap();
        let g = Graph::new(ndarray::array![[1.0, 0.5]], [], 0).unwrap();
        let e = attention_scores(&p, &cfg, &g, 2.0).unwrap();
        assert_eq!(e.layers.len(), 3);
        for layer in &e.layers {
            assert_eq!(layer.len(), 1);
            assert!(layer[0] == 0.0 || (layer[0] - 1.0).abs() < 1e-15);
        }
        assert!(e.to_dot().starts_with("graph attention {"));
    }
}
