use ndarray::Array1;
use rayon::prelude::*;

use super::forward::{backward, forward, ActivationTrace, TraceGrad};
use super::{GnnConfig, GradientSet, ModelParams};
use crate::defense::attention::{degree_weights, layer_loss_and_grads};
use crate::defense::relation::{relation_congruence_loss_and_grads, LayerPairs};
use crate::error::{Error, Result};
use crate::graph::Graph;

/// `-log softmax(logits)[label]`, evaluated with max subtraction.
pub fn cross_entropy(logits: &Array1<f64>, label: usize) -> f64 {
    -log_softmax(logits)[label]
}

pub(crate) fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.mapv(|z| z - lse)
}

pub(crate) fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    log_softmax(logits).mapv(f64::exp)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionTerm {
    pub weight: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationTerm {
    pub weight: f64,
    pub pairs: LayerPairs,
    pub num_slices: usize,
    /// Seed of the slice directions; hold it fixed to make the objective differentiable.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitDistillTerm {
    pub weight: f64,
    pub temperature: f64,
}

/// Which loss terms are active and with what weights.
///
/// Per-graph terms (cross-entropy, attention transfer, logit distillation) are averaged
/// over the batch; the relation term is computed once on samples pooled over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec<'a> {
    pub ce_weight: f64,
    /// Frozen reference model for the distillation terms.
    pub teacher: Option<&'a ModelParams>,
    pub attention: Option<AttentionTerm>,
    pub relation: Option<RelationTerm>,
    pub logit_kd: Option<LogitDistillTerm>,
}

impl<'a> LossSpec<'a> {
    pub fn cross_entropy() -> Self {
        LossSpec {
            ce_weight: 1.0,
            teacher: None,
            attention: None,
            relation: None,
            logit_kd: None,
        }
    }

    fn needs_teacher(&self) -> bool {
        self.attention.is_some() || self.relation.is_some() || self.logit_kd.is_some()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub attention: f64,
    pub relation: f64,
    pub logit_kd: f64,
    pub total: f64,
}

/// Batch loss and gradients for every active term of `spec`.
pub fn loss_and_grads(
    params: &ModelParams,
    config: &GnnConfig,
    batch: &[&Graph],
    spec: &LossSpec<'_>,
) -> Result<(LossBreakdown, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::Empty("loss needs a non-empty batch"));
    }
    let teacher = match (spec.needs_teacher(), spec.teacher) {
        (true, None) => return Err(Error::Config("distillation terms need a teacher".into())),
        (true, Some(t)) => {
            t.check_congruent(params)?;
            Some(t)
        }
        (false, _) => None,
    };
    for g in batch {
        if g.label() >= config.num_classes {
            return Err(Error::Config(format!("label {} out of range", g.label())));
        }
    }
    let b = batch.len() as f64;

    let traces: Vec<(ActivationTrace, Option<ActivationTrace>)> = batch
        .par_iter()
        .map(|g| {
            let s = forward(params, config, g)?;
            let t = teacher.map(|tp| forward(tp, config, g)).transpose()?;
            Ok((s, t))
        })
        .collect::<Result<_>>()?;

    let per_graph: Vec<(LossBreakdown, TraceGrad)> = batch
        .par_iter()
        .zip(traces.par_iter())
        .map(|(g, (s, t))| {
            let mut parts = LossBreakdown::default();
            let mut grad = TraceGrad::zeros_like(s);
            if spec.ce_weight != 0.0 {
                let logp = log_softmax(&s.logits);
                parts.ce = -logp[g.label()];
                let mut d = logp.mapv(f64::exp);
                d[g.label()] -= 1.0;
                grad.logits.scaled_add(spec.ce_weight / b, &d);
            }
            if let (Some(kd), Some(t)) = (spec.logit_kd, t) {
                let temp = kd.temperature;
                let qt = softmax(&(&t.logits / temp));
                let log_qs = log_softmax(&(&s.logits / temp));
                let log_qt = qt.mapv(|q| q.ln());
                parts.logit_kd = temp
                    * temp
                    * qt.iter()
                        .zip(log_qt.iter().zip(&log_qs))
                        .filter(|(&q, _)| q > 0.0)
                        .map(|(&q, (&lt, &ls))| q * (lt - ls))
                        .sum::<f64>();
                let d = (log_qs.mapv(f64::exp) - &qt) * temp;
                grad.logits.scaled_add(kd.weight / b, &d);
            }
            if let (Some(at), Some(t)) = (spec.attention, t) {
                let w = degree_weights(&g.degree());
                for (l, (ft, fs)) in t.layers.iter().zip(&s.layers).enumerate() {
                    let (loss, _, dfs) = layer_loss_and_grads(ft, fs, &w, at.p);
                    parts.attention += loss;
                    grad.layers[l].scaled_add(at.weight / b, &dfs);
                }
            }
            (parts, grad)
        })
        .collect();

    let mut breakdown = LossBreakdown::default();
    for (p, _) in &per_graph {
        breakdown.ce += p.ce / b;
        breakdown.attention += p.attention / b;
        breakdown.logit_kd += p.logit_kd / b;
    }
    let mut grads_by_graph: Vec<TraceGrad> = per_graph.into_iter().map(|(_, g)| g).collect();

    if let Some(rel) = &spec.relation {
        let (ts, ss): (Vec<ActivationTrace>, Vec<ActivationTrace>) = traces
            .iter()
            .map(|(s, t)| (t.clone().expect("teacher traces exist"), s.clone()))
            .unzip();
        let (value, dlayers) =
            relation_congruence_loss_and_grads(&ts, &ss, &rel.pairs, rel.num_slices, rel.seed)?;
        breakdown.relation = value;
        for (grad, dl) in grads_by_graph.iter_mut().zip(dlayers) {
            for (g, d) in grad.layers.iter_mut().zip(dl) {
                g.scaled_add(rel.weight, &d);
            }
        }
    }

    let weights = (
        spec.ce_weight,
        spec.attention.map_or(0.0, |a| a.weight),
        spec.relation.as_ref().map_or(0.0, |r| r.weight),
        spec.logit_kd.map_or(0.0, |k| k.weight),
    );
    breakdown.total = weights.0 * breakdown.ce
        + weights.1 * breakdown.attention
        + weights.2 * breakdown.relation
        + weights.3 * breakdown.logit_kd;

    let param_grads: Vec<ModelParams> = batch
        .par_iter()
        .zip(traces.par_iter())
        .zip(grads_by_graph.par_iter())
        .map(|((g, (s, _)), tg)| backward(params, config, g, s, tg, false).map(|(p, _)| p))
        .collect::<Result<_>>()?;
    let mut total = params.zeros_like();
    for g in &param_grads {
        total.add_scaled(g, 1.0);
    }
    Ok((breakdown, total))
}
