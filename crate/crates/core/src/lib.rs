//! Graph classifiers, subgraph backdoor attacks and attention-distillation backdoor
//! purification for small GCN/GIN models.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: simple undirected graphs, degrees, normalised adjacency, ER sampling
//! - [`dataset`]: TUDataset I/O, the synthetic corpus, stratified splits
//! - [`gnn`]: forward/backward engine, losses, SGD training, evaluation, checkpoints
//! - [`attack`]: ER subgraph triggers, poisoning, GTA-style trigger feature optimisation
//! - [`defense`]: attention transfer + relation congruence distillation
//! - [`baselines`]: fine-tuning, logit distillation, pruning, randomized smoothing
//! - [`metrics`] and [`experiment`]: ASR/ACC, the end-to-end runner, attention export

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod baselines;
pub mod dataset;
pub mod defense;
mod error;
pub mod experiment;
pub mod gnn;
pub mod graph;
pub mod metrics;

pub use error::{Error, Result};
pub use graph::{DegreeVector, Graph};
pub use dataset::{Dataset, SplitSpec};
pub use gnn::{Arch, GnnConfig, ModelParams, TrainConfig};
pub use attack::{PoisonReport, TriggerSpec};
pub use defense::{AttentionMap, DefenseConfig};
