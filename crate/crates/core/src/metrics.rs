//! Attack success rate, accuracy and confusion matrices.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gnn::{predict, GnnConfig, ModelParams};
use crate::graph::Graph;

fn predictions(params: &ModelParams, config: &GnnConfig, dataset: &Dataset) -> Result<Vec<usize>> {
    dataset
        .graphs
        .par_iter()
        .map(|g| predict(params, config, g))
        .collect()
}

/// Fraction of triggered graphs predicted as `target`; `None` when the set is empty
/// (the rate is undefined, not zero).
pub fn asr(params: &ModelParams, config: &GnnConfig, triggered: &Dataset, target: usize) -> Result<Option<f64>> {
    if triggered.is_empty() {
        return Ok(None);
    }
    Ok(asr_from_predictions(&predictions(params, config, triggered)?, target))
}

/// [`asr`] over precomputed predictions.
pub fn asr_from_predictions(predicted: &[usize], target: usize) -> Option<f64> {
    if predicted.is_empty() {
        return None;
    }
    let hits = predicted.iter().filter(|&&p| p == target).count();
    Some(hits as f64 / predicted.len() as f64)
}

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    /// Counts from `(true, predicted)` label pairs.
    pub fn from_pairs(num_classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut counts = vec![vec![0; num_classes]; num_classes];
        for (t, p) in pairs {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Config(format!("label pair ({t}, {p}) out of range")));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Per-class recall; `None` for classes absent from the data.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }
}

pub fn confusion_matrix(params: &ModelParams, config: &GnnConfig, dataset: &Dataset) -> Result<ConfusionMatrix> {
    if dataset.is_empty() {
        return Err(Error::Empty("confusion matrix needs a non-empty dataset"));
    }
    let k = dataset.num_classes.max(config.num_classes);
    let predicted = predictions(params, config, dataset)?;
    ConfusionMatrix::from_pairs(k, dataset.graphs.iter().map(Graph::label).zip(predicted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_dataset;
    use crate::gnn::{evaluate, init_params, Arch};
    use ndarray::array;

    fn cfg() -> GnnConfig {
        GnnConfig::new(Arch::Gin, 8, 2, 0)
    }

    fn constant(class: usize) -> ModelParams {
        let mut p = ModelParams::zeros(&cfg());
        p.bias = if class == 0 { array![1.0, 0.0] } else { array![0.0, 1.0] };
        p
    }

    #[test]
    fn asr_extremes_and_undefined() {
        let ds = synth_dataset(40, 0).unwrap();
        assert_eq!(asr(&constant(1), &cfg(), &ds, 1).unwrap(), Some(1.0));
        assert_eq!(asr(&constant(0), &cfg(), &ds, 1).unwrap(), Some(0.0));
        assert_eq!(asr(&constant(0), &cfg(), &ds.with_graphs(vec![]), 1).unwrap(), None);
    }

    #[test]
    fn asr_ratio() {
        // Single-node graphs; the model predicts class 1 exactly when the feature is 1.
        let cfg = GnnConfig { hidden_dim: 1, feature_dim: 1, num_layers: 2, ..cfg() };
        let mut p = ModelParams::zeros(&cfg);
        p.layers = vec![array![[1.0]], array![[1.0]]];
        p.classifier = array![[-1.0, 1.0]];
        p.bias = array![0.5, 0.0];
        let graphs = (0..8)
            .map(|i| crate::Graph::new(array![[if i < 3 { 1.0 } else { 0.0 }]], [], 0).unwrap())
            .collect();
        let ds = crate::Dataset::new("t", 2, graphs).unwrap();
        assert_eq!(asr(&p, &cfg, &ds, 1).unwrap(), Some(0.375));
    }

    #[test]
    fn confusion_shapes() {
        let ds = synth_dataset(40, 0).unwrap();
        let m = confusion_matrix(&constant(0), &cfg(), &ds).unwrap();
        assert_eq!(m.counts, vec![vec![20, 0], vec![20, 0]]);
        assert_eq!(m.per_class_accuracy(), vec![Some(1.0), Some(0.0)]);
        let p = init_params(&cfg()).unwrap();
        let m = confusion_matrix(&p, &cfg(), &ds).unwrap();
        assert_eq!(m.accuracy(), evaluate(&p, &cfg(), &ds).unwrap());
        assert_eq!(m.counts.iter().map(|r| r.iter().sum::<usize>()).collect::<Vec<_>>(), ds.class_counts());
    }
}
