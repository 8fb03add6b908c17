use ndarray::{Array1, Array2, Axis};

use super::{Arch, GnnConfig, ModelParams};
use crate::error::{Error, Result};
use crate::graph::Graph;

/// Per-layer activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// Post-ReLU `F^l`, one `N x C` matrix per message-passing layer.
    pub layers: Vec<Array2<f64>>,
    /// Column mean of the last layer.
    pub embedding: Array1<f64>,
    pub logits: Array1<f64>,
    /// `P H^(l-1)` for each layer, kept for the backward pass.
    aggregated: Vec<Array2<f64>>,
}

impl ActivationTrace {
    pub fn num_nodes(&self) -> usize {
        self.layers[0].nrows()
    }

    /// Predicted class, ties broken toward the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }

    /// Multiplies every activation by `c` (logits untouched). Test helper for
    /// scale-invariance properties.
    pub fn scaled(&self, c: f64) -> ActivationTrace {
        let mut t = self.clone();
        for f in &mut t.layers {
            f.mapv_inplace(|x| x * c);
        }
        t
    }

    /// Builds a trace from bare activations (no backward support).
    pub fn from_layers(layers: Vec<Array2<f64>>) -> ActivationTrace {
        let c = layers.last().map(|f| f.ncols()).unwrap_or(0);
        let embedding = layers
            .last()
            .and_then(|f| f.mean_axis(Axis(0)))
            .unwrap_or_else(|| Array1::zeros(c));
        ActivationTrace {
            layers,
            embedding,
            logits: Array1::zeros(0),
            aggregated: Vec::new(),
        }
    }
}

pub(crate) fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gradient of a scalar objective with respect to the trace's activations and logits.
#[derive(Debug, Clone)]
pub struct TraceGrad {
    pub layers: Vec<Array2<f64>>,
    pub logits: Array1<f64>,
}

impl TraceGrad {
    pub fn zeros_like(trace: &ActivationTrace) -> Self {
        TraceGrad {
            layers: trace.layers.iter().map(|f| Array2::zeros(f.raw_dim())).collect(),
            logits: Array1::zeros(trace.logits.len()),
        }
    }
}

/// The symmetric propagation matrix `P`: `I + A` for GIN (epsilon = 0) and
/// `D^-1/2 (A + I) D^-1/2` for GCN.
enum Propagator<'g> {
    Gin(&'g Graph),
    Gcn(Array2<f64>),
}

impl<'g> Propagator<'g> {
    fn new(arch: Arch, graph: &'g Graph) -> Self {
        match arch {
            Arch::Gin => Propagator::Gin(graph),
            Arch::Gcn => Propagator::Gcn(graph.normalized_adjacency()),
        }
    }

    fn apply(&self, h: &Array2<f64>) -> Array2<f64> {
        match self {
            Propagator::Gin(g) => {
                let mut out = h.clone();
                for &(a, b) in g.edges() {
                    let (ra, rb) = (h.row(a), h.row(b));
                    out.row_mut(a).scaled_add(1.0, &rb);
                    out.row_mut(b).scaled_add(1.0, &ra);
                }
                out
            }
            Propagator::Gcn(a) => a.dot(h),
        }
    }
}

/// Runs the model on one graph and records every layer's activations.
pub fn forward(params: &ModelParams, config: &GnnConfig, graph: &Graph) -> Result<ActivationTrace> {
    if graph.feature_dim() != config.feature_dim {
        return Err(Error::Shape(format!(
            "graph has {} features, model expects {}",
            graph.feature_dim(),
            config.feature_dim
        )));
    }
    params.check_shapes(config)?;
    let prop = Propagator::new(config.arch, graph);
    let mut layers = Vec::with_capacity(config.num_layers);
    let mut aggregated = Vec::with_capacity(config.num_layers);
    let mut h = graph.features().clone();
    for w in &params.layers {
        let agg = prop.apply(&h);
        h = agg.dot(w).mapv_into(|x| x.max(0.0));
        aggregated.push(agg);
        layers.push(h.clone());
    }
    let embedding = h.mean_axis(Axis(0)).expect("graphs have at least one node");
    let logits = embedding.dot(&params.classifier) + &params.bias;
    Ok(ActivationTrace {
        layers,
        embedding,
        logits,
        aggregated,
    })
}

/// Reverse pass through a trace produced by [`forward`] with the same params and graph.
///
/// `grad` carries the objective's direct dependence on each `F^l` and on the logits.
/// Returns parameter gradients and, when `want_input` is set, the gradient with respect
/// to the node features.
pub fn backward(
    params: &ModelParams,
    config: &GnnConfig,
    graph: &Graph,
    trace: &ActivationTrace,
    grad: &TraceGrad,
    want_input: bool,
) -> Result<(ModelParams, Option<Array2<f64>>)> {
    let k = params.layers.len();
    if trace.aggregated.len() != k || grad.layers.len() != k {
        return Err(Error::Shape("trace does not match the model depth".into()));
    }
    let prop = Propagator::new(config.arch, graph);
    let mut grads = params.zeros_like();

    let n = trace.num_nodes() as f64;
    let dlogits = &grad.logits;
    for (c, &e) in trace.embedding.iter().enumerate() {
        grads.classifier.row_mut(c).scaled_add(e, dlogits);
    }
    grads.bias.assign(dlogits);
    let dembed = params.classifier.dot(dlogits);

    let mut dh = grad.layers[k - 1].clone();
    for mut row in dh.rows_mut() {
        row.scaled_add(1.0 / n, &dembed);
    }
    let mut dinput = None;
    for l in (0..k).rev() {
        let mask = &trace.layers[l];
        let dpre = ndarray::Zip::from(&dh)
            .and(mask)
            .map_collect(|&g, &f| if f > 0.0 { g } else { 0.0 });
        grads.layers[l] = trace.aggregated[l].t().dot(&dpre);
        if l == 0 && !want_input {
            break;
        }
        let back = prop.apply(&dpre.dot(&params.layers[l].t()));
        if l == 0 {
            dinput = Some(back);
        } else {
            dh = back + &grad.layers[l - 1];
        }
    }
    Ok((grads, dinput))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::init_params;
    use ndarray::array;

    fn edge_graph() -> Graph {
        Graph::new(array![[1.0, 2.0], [3.0, -1.0]], [(0, 1)], 0).unwrap()
    }

    fn small_cfg(arch: Arch) -> GnnConfig {
        GnnConfig {
            arch,
            num_layers: 2,
            hidden_dim: 2,
            num_classes: 2,
            feature_dim: 2,
            readout: Default::default(),
            seed: 1,
        }
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let cfg = GnnConfig::new(Arch::Gin, 2, 3, 0);
        let mut p = ModelParams::zeros(&cfg);
        p.bias = array![0.5, -1.0, 2.0];
        let t = forward(&p, &cfg, &edge_graph()).unwrap();
        assert!(t.layers.iter().all(|f| f.iter().all(|&x| x == 0.0)));
        assert_eq!(t.logits, p.bias);
    }

    #[test]
    fn single_node_gcn_is_relu_of_input() {
        let cfg = small_cfg(Arch::Gcn);
        let mut p = ModelParams::zeros(&cfg);
        p.layers[0] = Array2::eye(2);
        p.layers[1] = Array2::eye(2);
        let g = Graph::new(array![[0.7, -0.3]], [], 0).unwrap();
        let t = forward(&p, &cfg, &g).unwrap();
        assert_eq!(t.layers[0], array![[0.7, 0.0]]);
    }

    #[test]
    fn gin_layer_matches_hand_aggregation() {
        let cfg = small_cfg(Arch::Gin);
        let mut p = ModelParams::zeros(&cfg);
        p.layers[0] = array![[1.0, -1.0], [0.5, 2.0]];
        p.layers[1] = Array2::eye(2);
        let t = forward(&p, &cfg, &edge_graph()).unwrap();
        // Both nodes aggregate to x0 + x1 = [4, 1]; [4, 1] W = [4.5, -2.0]; ReLU -> [4.5, 0].
        assert_eq!(t.layers[0], array![[4.5, 0.0], [4.5, 0.0]]);
        // Second layer: [9, 0] per node.
        assert_eq!(t.layers[1], array![[9.0, 0.0], [9.0, 0.0]]);
        assert_eq!(t.embedding, array![9.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = GnnConfig::new(Arch::Gin, 3, 2, 0);
        let p = init_params(&cfg).unwrap();
        assert!(forward(&p, &cfg, &edge_graph()).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&array![1.0, 1.0, 0.0]), 0);
        assert_eq!(argmax(&array![0.0, 2.0, 2.0]), 1);
    }
}
