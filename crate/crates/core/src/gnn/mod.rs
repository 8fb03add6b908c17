//! Fixed-architecture graph classifiers (GCN and GIN) with hand-written backprop.
//!
//! Every model is `num_layers` message-passing layers of uniform width followed by
//! mean pooling and a linear classifier. Activations are stored node-major (`N x C`).

mod forward;
mod loss;
mod train;

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use forward::{backward, forward, ActivationTrace, TraceGrad};
pub use loss::{
    cross_entropy, loss_and_grads, AttentionTerm, LogitDistillTerm, LossBreakdown, LossSpec,
    RelationTerm,
};
pub(crate) use forward::argmax;
pub(crate) use loss::log_softmax;
pub use train::{evaluate, predict, sgd_step, train, train_with_log, EpochStats, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gcn,
    Gin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub arch: Arch,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub readout: Readout,
    pub seed: u64,
}

impl GnnConfig {
    /// The reference 3-layer, 16-channel model.
    pub fn new(arch: Arch, feature_dim: usize, num_classes: usize, seed: u64) -> Self {
        GnnConfig {
            arch,
            num_layers: 3,
            hidden_dim: 16,
            num_classes,
            feature_dim,
            readout: Readout::MeanPool,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::Config(format!("num_layers must be >= 2, got {}", self.num_layers)));
        }
        if self.hidden_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("hidden_dim and num_classes must be positive".into()));
        }
        Ok(())
    }
}

/// Layer weights `W^(1) (d x C)`, `W^(2..k) (C x C)`, classifier `C x K` and bias `K`.
///
/// The same type doubles as a gradient container ([`GradientSet`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Array2<f64>>,
    pub classifier: Array2<f64>,
    pub bias: Array1<f64>,
}

pub type GradientSet = ModelParams;

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let s = glorot_bound(rows, cols);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-s..s))
}

/// `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform weights and zero bias, deterministic in `config.seed`.
pub fn init_params(config: &GnnConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.hidden_dim;
    let layers = (0..config.num_layers)
        .map(|l| {
            let fan_in = if l == 0 { config.feature_dim } else { c };
            glorot(fan_in, c, &mut rng)
        })
        .collect();
    let classifier = glorot(c, config.num_classes, &mut rng);
    Ok(ModelParams {
        layers,
        classifier,
        bias: Array1::zeros(config.num_classes),
    })
}

impl ModelParams {
    pub fn zeros(config: &GnnConfig) -> Self {
        let c = config.hidden_dim;
        ModelParams {
            layers: (0..config.num_layers)
                .map(|l| Array2::zeros((if l == 0 { config.feature_dim } else { c }, c)))
                .collect(),
            classifier: Array2::zeros((c, config.num_classes)),
            bias: Array1::zeros(config.num_classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            layers: self.layers.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            classifier: Array2::zeros(self.classifier.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    pub fn check_shapes(&self, config: &GnnConfig) -> Result<()> {
        let expected = ModelParams::zeros(config);
        self.check_congruent(&expected)
    }

    pub fn check_congruent(&self, other: &ModelParams) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.dim() == b.dim())
            && self.classifier.dim() == other.classifier.dim()
            && self.bias.len() == other.bias.len();
        if same {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets are not shape-congruent".into()))
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(|w| w.len()).sum::<usize>() + self.classifier.len() + self.bias.len()
    }

    /// All scalars in a fixed order: layers, classifier, bias (each row-major).
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.classifier.iter())
            .chain(self.bias.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|w| w.iter_mut())
            .chain(self.classifier.iter_mut())
            .chain(self.bias.iter_mut())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.scaled_add(scale, b);
        }
        self.classifier.scaled_add(scale, &other.classifier);
        self.bias.scaled_add(scale, &other.bias);
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixRecord {
    fn from_array(a: &Array2<f64>) -> Self {
        MatrixRecord {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    fn into_array(self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data)
            .map_err(|e| Error::Shape(format!("checkpoint matrix: {e}")))
    }
}

/// Self-describing checkpoint: the config plus row-major weights.
#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    config: GnnConfig,
    layers: Vec<MatrixRecord>,
    classifier: MatrixRecord,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: GnnConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(config: GnnConfig, params: ModelParams) -> Result<Self> {
        params.check_shapes(&config)?;
        Ok(Checkpoint { config, params })
    }

    pub fn to_json(&self) -> Result<String> {
        let record = CheckpointRecord {
            config: self.config.clone(),
            layers: self.params.layers.iter().map(MatrixRecord::from_array).collect(),
            classifier: MatrixRecord::from_array(&self.params.classifier),
            bias: self.params.bias.to_vec(),
        };
        Ok(serde_json::to_string_pretty(&record)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: CheckpointRecord = serde_json::from_str(text)?;
        record.config.validate()?;
        let params = ModelParams {
            layers: record
                .layers
                .into_iter()
                .map(MatrixRecord::into_array)
                .collect::<Result<_>>()?,
            classifier: record.classifier.into_array()?,
            bias: Array1::from(record.bias),
        };
        if !params.is_finite() {
            return Err(Error::Config("checkpoint contains non-finite weights".into()));
        }
        Checkpoint::new(record.config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}

/// Elementwise `a - b` over congruent parameter sets (used by tests and logging).
pub fn params_diff(a: &ModelParams, b: &ModelParams) -> ModelParams {
    let mut out = a.clone();
    for (o, w) in out.layers.iter_mut().zip(&b.layers) {
        Zip::from(o).and(w).for_each(|x, &y| *x -= y);
    }
    out.classifier -= &b.classifier;
    out.bias -= &b.bias;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GnnConfig {
        GnnConfig::new(Arch::Gin, 8, 2, 42)
    }

    #[test]
    fn glorot_bound_example() {
        assert_eq!(glorot_bound(8, 16), 0.5);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(&cfg()).unwrap();
        assert_eq!(a, init_params(&cfg()).unwrap());
        assert_eq!(a.layers[0].dim(), (8, 16));
        assert_eq!(a.layers[2].dim(), (16, 16));
        assert_eq!(a.classifier.dim(), (16, 2));
        let s = glorot_bound(8, 16);
        assert!(a.layers[0].iter().all(|x| x.abs() < s));
        assert!(a.bias.iter().all(|&b| b == 0.0));
        let other = init_params(&GnnConfig { seed: 43, ..cfg() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn config_validation() {
        assert!(init_params(&GnnConfig { num_layers: 1, ..cfg() }).is_err());
        assert!(init_params(&GnnConfig { hidden_dim: 0, ..cfg() }).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let p = init_params(&cfg()).unwrap();
        let ck = Checkpoint::new(cfg(), p).unwrap();
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);

        let mut bad: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        bad["config"]["hidden_dim"] = 8.into();
        assert!(Checkpoint::from_json(&bad.to_string()).is_err());
    }

    #[test]
    fn param_arithmetic() {
        let p = init_params(&cfg()).unwrap();
        let mut q = p.clone();
        q.add_scaled(&p, -1.0);
        assert_eq!(q.norm(), 0.0);
        assert_eq!(params_diff(&p, &p).norm(), 0.0);
        assert_eq!(p.iter().count(), p.num_scalars());
    }
}
