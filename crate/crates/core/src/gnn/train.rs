use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::forward;
use super::loss::{loss_and_grads, LossBreakdown, LossSpec};
use super::{GnnConfig, GradientSet, ModelParams};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Rescale each step's gradient to at most this global L2 norm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "batch_size must be positive and learning_rate non-negative (got {}, {})",
                self.batch_size, self.learning_rate
            )));
        }
        Ok(())
    }
}

/// `W <- W - lr * grad` for every parameter.
pub fn sgd_step(params: &ModelParams, grads: &GradientSet, learning_rate: f64) -> Result<ModelParams> {
    params.check_congruent(grads)?;
    let mut out = params.clone();
    out.add_scaled(grads, -learning_rate);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Batch losses averaged over the epoch (evaluated before each step).
    pub loss: LossBreakdown,
}

/// Shuffled mini-batch SGD for `train_config.epochs` epochs.
pub fn train(
    params: &ModelParams,
    config: &GnnConfig,
    dataset: &Dataset,
    train_config: &TrainConfig,
    spec: &LossSpec<'_>,
) -> Result<ModelParams> {
    train_with_log(params, config, &dataset.graphs, train_config, spec, |_, _| {})
}

/// [`train`] over a slice of graphs, calling `on_epoch` after every epoch.
///
/// When the spec has a relation term its slice seed is redrawn every step from the
/// training stream, so runs stay deterministic in `train_config.seed`.
pub fn train_with_log(
    params: &ModelParams,
    config: &GnnConfig,
    graphs: &[Graph],
    train_config: &TrainConfig,
    spec: &LossSpec<'_>,
    mut on_epoch: impl FnMut(&EpochStats, &ModelParams),
) -> Result<ModelParams> {
    train_config.validate()?;
    if graphs.is_empty() {
        return Err(Error::Empty("training set has no graphs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut params = params.clone();
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut step_spec = spec.clone();
    for epoch in 1..=train_config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0;
        for chunk in order.chunks(train_config.batch_size) {
            let batch: Vec<&Graph> = chunk.iter().map(|&i| &graphs[i]).collect();
            if let Some(rel) = step_spec.relation.as_mut() {
                rel.seed = rng.random();
            }
            let (loss, mut grads) = loss_and_grads(&params, config, &batch, &step_spec)?;
            if let Some(max) = train_config.grad_clip {
                let norm = grads.norm();
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            params = sgd_step(&params, &grads, train_config.learning_rate)?;
            sum.ce += loss.ce;
            sum.attention += loss.attention;
            sum.relation += loss.relation;
            sum.logit_kd += loss.logit_kd;
            sum.total += loss.total;
            batches += 1;
        }
        let n = batches as f64;
        let mean = LossBreakdown {
            ce: sum.ce / n,
            attention: sum.attention / n,
            relation: sum.relation / n,
            logit_kd: sum.logit_kd / n,
            total: sum.total / n,
        };
        on_epoch(&EpochStats { epoch, loss: mean }, &params);
    }
    if !params.is_finite() {
        return Err(Error::Config("training diverged to non-finite weights".into()));
    }
    Ok(params)
}

/// Argmax class, ties to the lowest index.
pub fn predict(params: &ModelParams, config: &GnnConfig, graph: &Graph) -> Result<usize> {
    Ok(forward(params, config, graph)?.argmax())
}

/// Fraction of graphs whose predicted class equals their label.
pub fn evaluate(params: &ModelParams, config: &GnnConfig, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("cannot evaluate on an empty dataset"));
    }
    let correct: usize = dataset
        .graphs
        .par_iter()
        .map(|g| predict(params, config, g).map(|p| usize::from(p == g.label())))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / dataset.len() as f64)
}
