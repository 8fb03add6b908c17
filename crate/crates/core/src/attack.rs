//! Subgraph backdoor triggers: construction, injection, corpus poisoning and
//! gradient-based trigger feature optimisation.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::defense::attention::{degree_weights, layer_loss_and_grads};
use crate::error::{Error, Result};
use crate::gnn::{backward, forward, GnnConfig, ModelParams, TraceGrad};
use crate::graph::{er_edges, Graph};

/// How trigger nodes' features are set on injection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Topology-only trigger; host features are left alone.
    #[default]
    KeepOriginal,
    /// Every trigger node gets the vector filled with `value`.
    OverwriteConstant { value: f64 },
    /// Trigger features are learned (see [`optimize_trigger_features`]) and copied in.
    Optimized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerSpec {
    /// Trigger node count as a fraction of the corpus's average node count.
    pub trigger_size: f64,
    pub er_edge_prob: f64,
    /// Fraction of training graphs poisoned.
    pub injection_ratio: f64,
    pub target_label: usize,
    #[serde(default)]
    pub feature_mode: FeatureMode,
    /// Also cut edges between trigger nodes and the rest of the host graph.
    #[serde(default)]
    pub detach_host_edges: bool,
    pub seed: u64,
}

impl Default for TriggerSpec {
    fn default() -> Self {
        TriggerSpec {
            trigger_size: 0.2,
            er_edge_prob: 0.8,
            injection_ratio: 0.05,
            target_label: 1,
            feature_mode: FeatureMode::KeepOriginal,
            detach_host_edges: false,
            seed: 0,
        }
    }
}

impl TriggerSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.trigger_size > 0.0 && self.trigger_size <= 1.0) {
            return Err(Error::Config(format!("trigger_size {} not in (0, 1]", self.trigger_size)));
        }
        if !(0.0..=1.0).contains(&self.injection_ratio) {
            return Err(Error::Config(format!(
                "injection_ratio {} not in [0, 1]",
                self.injection_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.er_edge_prob) {
            return Err(Error::Config(format!("er_edge_prob {} not in [0, 1]", self.er_edge_prob)));
        }
        if self.target_label >= num_classes {
            return Err(Error::Config(format!(
                "target label {} out of range for {num_classes} classes",
                self.target_label
            )));
        }
        Ok(())
    }

    pub fn trigger_nodes(&self, avg_nodes: f64) -> usize {
        (avg_nodes * self.trigger_size).round() as usize
    }
}

/// Audit trail of a poisoning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonReport {
    pub poisoned_indices: Vec<usize>,
    pub trigger: Graph,
    /// `trigger_node_assignments[k][t]` is the host node that trigger node `t` replaced
    /// in graph `poisoned_indices[k]`.
    pub trigger_node_assignments: Vec<Vec<usize>>,
    /// Training graphs too small to host the trigger.
    #[serde(default)]
    pub skipped_too_small: Vec<usize>,
    pub target_label: usize,
}

impl PoisonReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

const TRIGGER_FEATURE_STREAM: u64 = 0x7f4a_7c15_9e37_79b9;
const POISON_STREAM: u64 = 0x2545_f491_4f6c_dd1d;
const TEST_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// ER trigger on `round(avg_nodes * trigger_size)` nodes, deterministic in `spec.seed`.
pub fn make_er_trigger(spec: &TriggerSpec, avg_nodes: f64, feature_dim: usize) -> Result<Graph> {
    let n = spec.trigger_nodes(avg_nodes);
    if n < 2 {
        return Err(Error::Config(format!(
            "trigger would have {n} nodes (avg {avg_nodes:.2} x {}); need at least 2",
            spec.trigger_size
        )));
    }
    if !(0.0..=1.0).contains(&spec.er_edge_prob) {
        return Err(Error::Config(format!("er_edge_prob {} not in [0, 1]", spec.er_edge_prob)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let edges = er_edges(n, spec.er_edge_prob, &mut rng);
    let features = match spec.feature_mode {
        FeatureMode::KeepOriginal => Array2::zeros((n, feature_dim)),
        FeatureMode::OverwriteConstant { value } => Array2::from_elem((n, feature_dim), value),
        FeatureMode::Optimized => {
            let mut frng = ChaCha8Rng::seed_from_u64(spec.seed ^ TRIGGER_FEATURE_STREAM);
            Array2::from_shape_simple_fn((n, feature_dim), || frng.random::<f64>())
        }
    };
    Graph::new(features, edges, 0)
}

/// Replaces the subgraph induced by `trigger.num_nodes()` randomly chosen host nodes with
/// the trigger. Returns the new graph and the host node for each trigger node.
pub fn inject_trigger(
    graph: &Graph,
    trigger: &Graph,
    spec: &TriggerSpec,
    seed: u64,
) -> Result<(Graph, Vec<usize>)> {
    let nt = trigger.num_nodes();
    if graph.num_nodes() < nt {
        return Err(Error::GraphTooSmall {
            nodes: graph.num_nodes(),
            trigger: nt,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignment = rand::seq::index::sample(&mut rng, graph.num_nodes(), nt).into_vec();
    let injected = inject_at(graph, trigger, spec, &assignment)?;
    Ok((injected, assignment))
}

/// Injection at a fixed assignment (trigger node `t` -> host node `assignment[t]`).
pub fn inject_at(graph: &Graph, trigger: &Graph, spec: &TriggerSpec, assignment: &[usize]) -> Result<Graph> {
    if assignment.len() != trigger.num_nodes() {
        return Err(Error::Shape("assignment length differs from trigger size".into()));
    }
    let mut chosen = vec![false; graph.num_nodes()];
    for &v in assignment {
        if v >= graph.num_nodes() || std::mem::replace(&mut chosen[v], true) {
            return Err(Error::InvalidGraph("assignment must be distinct host nodes".into()));
        }
    }
    let kept = graph.edges().iter().copied().filter(|&(a, b)| {
        if spec.detach_host_edges {
            !chosen[a] && !chosen[b]
        } else {
            !(chosen[a] && chosen[b])
        }
    });
    let added = trigger.edges().iter().map(|&(a, b)| (assignment[a], assignment[b]));
    let mut features = graph.features().clone();
    if !matches!(spec.feature_mode, FeatureMode::KeepOriginal) {
        if trigger.feature_dim() != graph.feature_dim() {
            return Err(Error::Shape("trigger and host feature widths differ".into()));
        }
        for (t, &v) in assignment.iter().enumerate() {
            features.row_mut(v).assign(&trigger.features().row(t));
        }
    }
    Graph::new(features, kept.chain(added).collect::<Vec<_>>(), graph.label())
}

/// Builds the trigger and poisons `round(injection_ratio * |train|)` training graphs.
pub fn poison_dataset(train: &Dataset, spec: &TriggerSpec, avg_nodes: f64) -> Result<(Dataset, PoisonReport)> {
    spec.validate(train.num_classes)?;
    let trigger = make_er_trigger(spec, avg_nodes, train.feature_dim)?;
    poison_with_trigger(train, spec, &trigger)
}

/// Poisons with a given trigger. Non-target graphs are preferred; target-class graphs are
/// only used when there are not enough others. Poisoned labels become the target label.
pub fn poison_with_trigger(train: &Dataset, spec: &TriggerSpec, trigger: &Graph) -> Result<(Dataset, PoisonReport)> {
    spec.validate(train.num_classes)?;
    let count = (spec.injection_ratio * train.len() as f64).round() as usize;
    if count == 0 {
        return Err(Error::Config(format!(
            "injection ratio {} poisons no graphs out of {}",
            spec.injection_ratio,
            train.len()
        )));
    }
    let nt = trigger.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ POISON_STREAM);
    let (mut preferred, mut fallback, mut skipped) = (Vec::new(), Vec::new(), Vec::new());
    for (i, g) in train.graphs.iter().enumerate() {
        if g.num_nodes() < nt {
            skipped.push(i);
        } else if g.label() != spec.target_label {
            preferred.push(i);
        } else {
            fallback.push(i);
        }
    }
    preferred.shuffle(&mut rng);
    fallback.shuffle(&mut rng);
    let mut chosen: Vec<usize> = preferred.into_iter().chain(fallback).take(count).collect();
    if chosen.len() < count {
        return Err(Error::Config(format!(
            "only {} graphs can host a {nt}-node trigger, {count} requested",
            chosen.len()
        )));
    }
    chosen.sort_unstable();

    let mut graphs = train.graphs.clone();
    let mut assignments = Vec::with_capacity(count);
    for &i in &chosen {
        let (g, assignment) = inject_trigger(&graphs[i], trigger, spec, rng.random())?;
        graphs[i] = g.with_label(spec.target_label);
        assignments.push(assignment);
    }
    let report = PoisonReport {
        poisoned_indices: chosen,
        trigger: trigger.clone(),
        trigger_node_assignments: assignments,
        skipped_too_small: skipped,
        target_label: spec.target_label,
    };
    Ok((train.with_graphs(graphs), report))
}

/// Test graphs with the trigger injected, for measuring attack success.
#[derive(Debug, Clone)]
pub struct TriggeredSet {
    /// Only graphs whose true label differs from the target; labels are the true ones.
    pub dataset: Dataset,
    /// Index into the source test set for each triggered graph.
    pub source_indices: Vec<usize>,
    pub assignments: Vec<Vec<usize>>,
    /// Eligible graphs that were too small to host the trigger.
    pub skipped_too_small: Vec<usize>,
}

/// Injects the report's trigger into every non-target test graph with fresh seeded
/// assignments. True labels are kept.
pub fn apply_trigger_to_test(test: &Dataset, report: &PoisonReport, spec: &TriggerSpec) -> Result<TriggeredSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ TEST_STREAM);
    let mut out = TriggeredSet {
        dataset: test.with_graphs(Vec::new()),
        source_indices: Vec::new(),
        assignments: Vec::new(),
        skipped_too_small: Vec::new(),
    };
    for (i, g) in test.graphs.iter().enumerate() {
        if g.label() == report.target_label {
            continue;
        }
        let seed: u64 = rng.random();
        match inject_trigger(g, &report.trigger, spec, seed) {
            Ok((h, assignment)) => {
                out.dataset.graphs.push(h);
                out.source_indices.push(i);
                out.assignments.push(assignment);
            }
            Err(Error::GraphTooSmall { .. }) => out.skipped_too_small.push(i),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Settings for [`optimize_trigger_features`].
#[derive(Debug, Clone)]
pub struct TriggerOptimization<'a> {
    pub steps: usize,
    pub step_size: f64,
    /// Also keep the backdoored model's attention close to `teacher`'s on triggered graphs.
    pub adaptive: bool,
    pub teacher: Option<&'a ModelParams>,
    /// Weight of the attention-distillation penalty in the adaptive objective.
    pub adaptive_weight: f64,
    /// Attention exponent used by the penalty.
    pub p: f64,
}

struct TriggerProblem<'a> {
    params: &'a ModelParams,
    config: &'a GnnConfig,
    trigger: &'a Graph,
    spec: &'a TriggerSpec,
    hosts: Vec<(Graph, Vec<usize>)>,
    opts: &'a TriggerOptimization<'a>,
}

impl TriggerProblem<'_> {
    fn graphs_with(&self, features: &Array2<f64>) -> Result<Vec<(Graph, &[usize])>> {
        let mut trig = self.trigger.clone();
        trig.set_features(features.clone())?;
        self.hosts
            .iter()
            .map(|(h, a)| Ok((inject_at(h, &trig, self.spec, a)?, a.as_slice())))
            .collect()
    }

    /// Mean target logit minus the weighted attention penalty, and its gradient with
    /// respect to the trigger features.
    fn objective(&self, features: &Array2<f64>, want_grad: bool) -> Result<(f64, Array2<f64>)> {
        let n = self.hosts.len() as f64;
        let target = self.spec.target_label;
        let mut value = 0.0;
        let mut grad = Array2::zeros(features.raw_dim());
        for (g, assignment) in self.graphs_with(features)? {
            let s = forward(self.params, self.config, &g)?;
            value += s.logits[target] / n;
            let mut gs = TraceGrad::zeros_like(&s);
            gs.logits[target] = 1.0 / n;
            let mut teacher_part = None;
            if self.opts.adaptive {
                let tp = self
                    .opts
                    .teacher
                    .ok_or_else(|| Error::Config("adaptive trigger optimisation needs a teacher".into()))?;
                let t = forward(tp, self.config, &g)?;
                let w = degree_weights(&g.degree());
                let lambda = self.opts.adaptive_weight;
                let mut gt = TraceGrad::zeros_like(&t);
                for l in 0..s.layers.len() {
                    let (loss, dft, dfs) = layer_loss_and_grads(&t.layers[l], &s.layers[l], &w, self.opts.p);
                    value -= lambda * loss / n;
                    gs.layers[l].scaled_add(-lambda / n, &dfs);
                    gt.layers[l].scaled_add(-lambda / n, &dft);
                }
                teacher_part = Some((tp, t, gt));
            }
            if !want_grad {
                continue;
            }
            let (_, dx) = backward(self.params, self.config, &g, &s, &gs, true)?;
            let mut dx = dx.expect("input gradient requested");
            if let Some((tp, t, gt)) = teacher_part {
                let (_, dxt) = backward(tp, self.config, &g, &t, &gt, true)?;
                dx += &dxt.expect("input gradient requested");
            }
            for (k, &v) in assignment.iter().enumerate() {
                grad.row_mut(k).scaled_add(1.0, &dx.row(v));
            }
        }
        Ok((value, grad))
    }
}

/// GTA-style feature trigger: projected gradient ascent (features kept in `[0, 1]`) on
/// the backdoored model's mean target-class logit over triggered `hosts`, with
/// backtracking so the objective never decreases. With `adaptive` set, the objective
/// also subtracts `adaptive_weight * L_AD(teacher, model)` on the triggered graphs.
pub fn optimize_trigger_features(
    params: &ModelParams,
    config: &GnnConfig,
    trigger: &Graph,
    spec: &TriggerSpec,
    hosts: &[Graph],
    opts: &TriggerOptimization<'_>,
) -> Result<(Graph, Vec<f64>)> {
    if spec.feature_mode != FeatureMode::Optimized {
        return Err(Error::Config("trigger optimisation requires feature_mode = optimized".into()));
    }
    if opts.adaptive && opts.teacher.is_none() {
        return Err(Error::Config("adaptive trigger optimisation needs a teacher".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ POISON_STREAM ^ TEST_STREAM);
    let hosts = hosts
        .iter()
        .filter(|h| h.num_nodes() >= trigger.num_nodes())
        .map(|h| {
            let (_, a) = inject_trigger(h, trigger, spec, rng.random())?;
            Ok((h.clone(), a))
        })
        .collect::<Result<Vec<_>>>()?;
    if hosts.is_empty() {
        return Err(Error::Empty("no host graph can carry the trigger"));
    }
    let problem = TriggerProblem {
        params,
        config,
        trigger,
        spec,
        hosts,
        opts,
    };
    let mut x = trigger.features().clone();
    let (mut value, mut grad) = problem.objective(&x, true)?;
    let mut history = vec![value];
    for _ in 0..opts.steps {
        let mut step = opts.step_size;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = (&x + &(&grad * step)).mapv(|v| v.clamp(0.0, 1.0));
            let (cv, _) = problem.objective(&candidate, false)?;
            if cv >= value {
                x = candidate;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if accepted {
            (value, grad) = problem.objective(&x, true)?;
        }
        history.push(value);
    }
    let mut out = trigger.clone();
    out.set_features(x)?;
    Ok((out, history))
}
