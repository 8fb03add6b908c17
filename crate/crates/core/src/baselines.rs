//! Reference defenses: plain fine-tuning, logit distillation, feature-similarity pruning
//! and randomized smoothing.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gnn::{
    argmax, forward, predict, train, GnnConfig, LogitDistillTerm, LossSpec, ModelParams, TrainConfig,
};
use crate::graph::Graph;

/// Cross-entropy fine-tuning on the clean holdout.
pub fn finetune_only(
    backdoored: &ModelParams,
    config: &GnnConfig,
    clean: &Dataset,
    train_config: &TrainConfig,
) -> Result<ModelParams> {
    train(backdoored, config, clean, train_config, &LossSpec::cross_entropy())
}

/// Student minimises `CE + T^2 KL(softmax(z_T / T) || softmax(z_S / T))`.
pub fn vanilla_distill(
    backdoored: &ModelParams,
    teacher: &ModelParams,
    config: &GnnConfig,
    clean: &Dataset,
    train_config: &TrainConfig,
    temperature: f64,
) -> Result<ModelParams> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let spec = LossSpec {
        ce_weight: 1.0,
        teacher: Some(teacher),
        logit_kd: Some(LogitDistillTerm {
            weight: 1.0,
            temperature,
        }),
        ..LossSpec::cross_entropy()
    };
    train(backdoored, config, clean, train_config, &spec)
}

/// `KL(softmax(teacher / T) || softmax(student / T))`.
pub fn kl_divergence(teacher_logits: &Array1<f64>, student_logits: &Array1<f64>, temperature: f64) -> f64 {
    let lt = crate::gnn::log_softmax(&(teacher_logits / temperature));
    let ls = crate::gnn::log_softmax(&(student_logits / temperature));
    lt.iter()
        .zip(&ls)
        .map(|(&a, &b)| {
            let q = a.exp();
            if q > 0.0 {
                q * (a - b)
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub cosine_threshold: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            cosine_threshold: 0.2,
        }
    }
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Mean input-feature cosine similarity of each node to its neighbours (`None` when
/// isolated).
pub fn neighbor_similarity(graph: &Graph) -> Vec<Option<f64>> {
    let f = graph.features();
    (0..graph.num_nodes())
        .map(|v| {
            let nb = graph.neighbors(v);
            (!nb.is_empty()).then(|| {
                nb.iter().map(|&u| cosine(f.row(v), f.row(u))).sum::<f64>() / nb.len() as f64
            })
        })
        .collect()
}

/// Drops nodes whose mean neighbour similarity is below the threshold. Isolated nodes
/// stay; if nothing would survive, the most similar node is kept.
pub fn prune_graph(graph: &Graph, prune: &PruneConfig) -> Result<Graph> {
    if !(-1.0..=1.0).contains(&prune.cosine_threshold) {
        return Err(Error::Config(format!(
            "cosine threshold {} not in [-1, 1]",
            prune.cosine_threshold
        )));
    }
    let sims = neighbor_similarity(graph);
    let mut keep: Vec<usize> = sims
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_none_or(|s| s >= prune.cosine_threshold))
        .map(|(v, _)| v)
        .collect();
    if keep.is_empty() {
        let best = sims
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (v, s)| {
                let s = s.unwrap_or(f64::INFINITY);
                if s > acc.1 {
                    (v, s)
                } else {
                    acc
                }
            })
            .0;
        keep.push(best);
    }
    if keep.len() == graph.num_nodes() {
        return Ok(graph.clone());
    }
    graph.induced_subgraph(&keep)
}

pub fn prune_dataset(dataset: &Dataset, prune: &PruneConfig) -> Result<Dataset> {
    let graphs = dataset
        .graphs
        .par_iter()
        .map(|g| prune_graph(g, prune))
        .collect::<Result<_>>()?;
    Ok(dataset.with_graphs(graphs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingConfig {
    pub keep_prob_nodes: f64,
    pub keep_prob_edges: f64,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            keep_prob_nodes: 0.8,
            keep_prob_edges: 0.8,
            num_samples: 10,
            seed: 0,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| p > 0.0 && p <= 1.0;
        if !ok(self.keep_prob_nodes) || !ok(self.keep_prob_edges) || self.num_samples == 0 {
            return Err(Error::Config(format!("invalid smoothing config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothedPrediction {
    pub class: usize,
    pub votes: Vec<usize>,
}

/// Random node/edge subsample; `None` when every node was dropped.
fn subsample<R: Rng>(graph: &Graph, s: &SmoothingConfig, rng: &mut R) -> Result<Option<Graph>> {
    let keep: Vec<usize> = (0..graph.num_nodes())
        .filter(|_| rng.random_bool(s.keep_prob_nodes))
        .collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let sub = graph.induced_subgraph(&keep)?;
    let edges: Vec<_> = sub
        .edges()
        .iter()
        .copied()
        .filter(|_| rng.random_bool(s.keep_prob_edges))
        .collect();
    Graph::new(sub.features().clone(), edges, sub.label()).map(Some)
}

/// Majority vote over `num_samples` randomly thinned copies of the graph (ties to the
/// lowest class). A copy with no nodes votes for the bias-only prediction.
pub fn smoothed_predict(
    params: &ModelParams,
    config: &GnnConfig,
    graph: &Graph,
    smoothing: &SmoothingConfig,
) -> Result<SmoothedPrediction> {
    smoothing.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(smoothing.seed);
    let mut votes = vec![0; config.num_classes];
    for _ in 0..smoothing.num_samples {
        let class = match subsample(graph, smoothing, &mut rng)? {
            Some(g) => forward(params, config, &g)?.argmax(),
            None => argmax(&params.bias),
        };
        votes[class] += 1;
    }
    let mut class = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[class] {
            class = c;
        }
    }
    Ok(SmoothedPrediction { class, votes })
}

/// Smoothed predictions for a whole dataset; graph `i` uses seed `smoothing.seed + i`.
pub fn smoothed_predictions(
    params: &ModelParams,
    config: &GnnConfig,
    dataset: &Dataset,
    smoothing: &SmoothingConfig,
) -> Result<Vec<usize>> {
    dataset
        .graphs
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let s = SmoothingConfig {
                seed: smoothing.seed.wrapping_add(i as u64),
                ..*smoothing
            };
            smoothed_predict(params, config, g, &s).map(|p| p.class)
        })
        .collect()
}

/// Plain (unsmoothed) predictions, for comparisons.
pub fn plain_predictions(params: &ModelParams, config: &GnnConfig, dataset: &Dataset) -> Result<Vec<usize>> {
    dataset.graphs.par_iter().map(|g| predict(params, config, g)).collect()
}
