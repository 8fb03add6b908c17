//! Backdoor purification by attention distillation.
//!
//! The backdoored model is first fine-tuned on the defender's clean graphs and frozen as
//! a teacher. The original backdoored model is then trained as the student on
//!
//! ```text
//! L = L_CE + beta * sum_l L_AD(F_T^l, F_S^l) + gamma * L_RC
//! ```
//!
//! where `L_AD` compares normalised degree-weighted attention maps layer by layer and
//! `L_RC` compares the distributions of inter-layer relation vectors with sliced W2.

pub mod attention;
pub mod relation;
pub mod wasserstein;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gnn::{
    evaluate, train_with_log, AttentionTerm, GnnConfig, LossBreakdown, LossSpec, ModelParams,
    RelationTerm, TrainConfig,
};
use crate::metrics::asr;

pub use attention::{attention_distill_loss, attention_map, normalize_attention, AttentionMap};
pub use relation::{relation_congruence_loss, relation_samples, LayerPairs, RelationSamples};
pub use wasserstein::{sliced_w2, sliced_w2_with_directions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    /// Attention exponent.
    pub p: f64,
    pub beta: f64,
    pub gamma: f64,
    pub pairs: LayerPairs,
    pub finetune_epochs: usize,
    pub distill_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub num_slices: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            p: 2.0,
            beta: 1.0,
            gamma: 1.0,
            pairs: LayerPairs::Full,
            finetune_epochs: 10,
            distill_epochs: 30,
            learning_rate: 0.001,
            batch_size: 64,
            num_slices: 16,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl DefenseConfig {
    /// Settings for holdouts of a dozen graphs: smaller batches so an epoch is several
    /// steps, a larger step and gradient clipping so unnormalised GIN sums stay stable.
    /// Loss weights, `p`, pairs and epoch counts are the defaults.
    pub fn desk_scale() -> Self {
        DefenseConfig {
            learning_rate: 0.03,
            batch_size: 4,
            grad_clip: Some(1.0),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0) {
            return Err(Error::Config(format!("p = {} must be >= 1", self.p)));
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config("beta and gamma must be non-negative".into()));
        }
        if self.num_slices == 0 || self.batch_size == 0 {
            return Err(Error::Config("num_slices and batch_size must be positive".into()));
        }
        Ok(())
    }

    fn train_config(&self, epochs: usize, stream: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed ^ stream,
            grad_clip: self.grad_clip,
        }
    }

    /// The distillation objective against `teacher`; inactive terms are left out.
    pub fn loss_spec<'a>(&self, teacher: &'a ModelParams) -> LossSpec<'a> {
        LossSpec {
            ce_weight: 1.0,
            teacher: Some(teacher),
            attention: (self.beta > 0.0).then_some(AttentionTerm {
                weight: self.beta,
                p: self.p,
            }),
            relation: (self.gamma > 0.0).then(|| RelationTerm {
                weight: self.gamma,
                pairs: self.pairs.clone(),
                num_slices: self.num_slices,
                seed: self.seed,
            }),
            logit_kd: None,
        }
    }
}

const FINETUNE_STREAM: u64 = 0x5851_f42d_4c95_7f2d;
const DISTILL_STREAM: u64 = 0x1405_7b7e_f767_814f;

/// Cross-entropy fine-tuning of the backdoored model on clean data. The result is used
/// as a frozen teacher.
pub fn finetune_teacher(
    backdoored: &ModelParams,
    config: &GnnConfig,
    clean: &Dataset,
    defense: &DefenseConfig,
) -> Result<ModelParams> {
    defense.validate()?;
    if clean.is_empty() {
        return Err(Error::Empty("defender has no clean graphs"));
    }
    let tc = defense.train_config(defense.finetune_epochs, FINETUNE_STREAM);
    train_with_log(backdoored, config, &clean.graphs, &tc, &LossSpec::cross_entropy(), |_, _| {})
}

/// Held-out data evaluated after every distillation epoch.
#[derive(Debug, Clone, Copy)]
pub struct DefenseProbe<'a> {
    pub clean: &'a Dataset,
    pub triggered: &'a Dataset,
    pub target_label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseEpochLog {
    pub epoch: usize,
    #[serde(rename = "L_CE")]
    pub l_ce: f64,
    #[serde(rename = "L_AD")]
    pub l_ad: f64,
    #[serde(rename = "L_RC")]
    pub l_rc: f64,
    pub total: f64,
    pub clean_acc: Option<f64>,
    pub asr_probe: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DefenseOutcome {
    pub teacher: ModelParams,
    pub purified: ModelParams,
    pub log: Vec<DefenseEpochLog>,
}

/// Fine-tune a teacher, then distill the backdoored student against it.
pub fn graphnad_defend(
    backdoored: &ModelParams,
    config: &GnnConfig,
    clean: &Dataset,
    defense: &DefenseConfig,
) -> Result<ModelParams> {
    Ok(graphnad_defend_logged(backdoored, config, clean, defense, None)?.purified)
}

/// [`graphnad_defend`] keeping the teacher and a per-epoch log (with probe metrics when
/// a probe is given).
pub fn graphnad_defend_logged(
    backdoored: &ModelParams,
    config: &GnnConfig,
    clean: &Dataset,
    defense: &DefenseConfig,
    probe: Option<DefenseProbe<'_>>,
) -> Result<DefenseOutcome> {
    let teacher = finetune_teacher(backdoored, config, clean, defense)?;
    let (purified, log) = distill_student(backdoored, &teacher, config, clean, defense, probe)?;
    Ok(DefenseOutcome {
        teacher,
        purified,
        log,
    })
}

/// The distillation stage alone, against an already frozen teacher.
pub fn distill_student(
    student: &ModelParams,
    teacher: &ModelParams,
    config: &GnnConfig,
    clean: &Dataset,
    defense: &DefenseConfig,
    probe: Option<DefenseProbe<'_>>,
) -> Result<(ModelParams, Vec<DefenseEpochLog>)> {
    defense.validate()?;
    if clean.is_empty() {
        return Err(Error::Empty("defender has no clean graphs"));
    }
    let spec = defense.loss_spec(teacher);
    let tc = defense.train_config(defense.distill_epochs, DISTILL_STREAM);
    let mut log = Vec::with_capacity(defense.distill_epochs);
    let mut probe_err = None;
    let purified = train_with_log(student, config, &clean.graphs, &tc, &spec, |stats, params| {
        let LossBreakdown {
            ce,
            attention,
            relation,
            total,
            ..
        } = stats.loss;
        let (clean_acc, asr_probe) = match probe {
            Some(pr) => {
                let acc = (!pr.clean.is_empty()).then(|| evaluate(params, config, pr.clean));
                let rate = asr(params, config, pr.triggered, pr.target_label);
                match (acc.transpose(), rate) {
                    (Ok(a), Ok(r)) => (a, r),
                    (Err(e), _) | (_, Err(e)) => {
                        probe_err.get_or_insert(e);
                        (None, None)
                    }
                }
            }
            None => (None, None),
        };
        log.push(DefenseEpochLog {
            epoch: stats.epoch,
            l_ce: ce,
            l_ad: attention,
            l_rc: relation,
            total,
            clean_acc,
            asr_probe,
        });
    })?;
    if let Some(e) = probe_err {
        return Err(e);
    }
    Ok((purified, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_dataset;
    use crate::gnn::{init_params, train, Arch};

    fn setup() -> (GnnConfig, ModelParams, Dataset) {
        let cfg = GnnConfig::new(Arch::Gin, 8, 2, 1);
        let p = init_params(&cfg).unwrap();
        (cfg, p, synth_dataset(24, 4).unwrap())
    }

    #[test]
    fn zero_finetune_epochs_returns_backdoored() {
        let (cfg, p, ds) = setup();
        let d = DefenseConfig { finetune_epochs: 0, ..Default::default() };
        assert_eq!(finetune_teacher(&p, &cfg, &ds, &d).unwrap(), p);
        assert!(finetune_teacher(&p, &cfg, &ds.with_graphs(vec![]), &d).is_err());
    }

    #[test]
    fn zero_weights_reduce_to_finetuning() {
        let (cfg, p, ds) = setup();
        let d = DefenseConfig {
            beta: 0.0,
            gamma: 0.0,
            finetune_epochs: 2,
            distill_epochs: 3,
            learning_rate: 0.01,
            batch_size: 8,
            ..Default::default()
        };
        let out = graphnad_defend_logged(&p, &cfg, &ds, &d, None).unwrap();
        let tc = d.train_config(3, DISTILL_STREAM);
        let plain = train(&p, &cfg, &ds, &tc, &LossSpec::cross_entropy()).unwrap();
        assert_eq!(out.purified, plain);
        assert_eq!(out.log.len(), 3);
        assert!(out.log.iter().all(|l| l.l_ad == 0.0 && l.l_rc == 0.0));
    }

    #[test]
    fn defense_is_deterministic() {
        let (cfg, p, ds) = setup();
        let d = DefenseConfig {
            finetune_epochs: 1,
            distill_epochs: 2,
            batch_size: 8,
            learning_rate: 0.01,
            ..Default::default()
        };
        let a = graphnad_defend(&p, &cfg, &ds, &d).unwrap();
        let b = graphnad_defend(&p, &cfg, &ds, &d).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(DefenseConfig { p: 0.5, ..Default::default() }.validate().is_err());
        assert!(DefenseConfig { beta: -1.0, ..Default::default() }.validate().is_err());
        assert!(DefenseConfig { num_slices: 0, ..Default::default() }.validate().is_err());
    }
}
