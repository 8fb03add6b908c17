//! Simple undirected graphs with dense node features.
//!
//! Edges are stored once per unordered pair as `(i, j)` with `i < j`, sorted.
//! Self-loops never appear in the edge list; they only show up inside
//! [`Graph::normalized_adjacency`].

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on nodes per graph; dense `N x N` propagation matrices are used throughout.
pub const DEFAULT_MAX_NODES: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRepr", into = "GraphRepr")]
pub struct Graph {
    features: Array2<f64>,
    edges: Vec<(usize, usize)>,
    label: usize,
    neighbors: Vec<Vec<usize>>,
}

/// Node degrees on the original graph (self-loops excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegreeVector(pub Vec<usize>);

impl DegreeVector {
    pub fn max(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl Graph {
    /// Builds a graph from an `N x d` feature matrix and an edge list.
    ///
    /// Pairs are canonicalised to `(min, max)` and deduplicated, so `(1, 0)` and
    /// `(0, 1)` name the same edge. Self-loops and out-of-range endpoints are rejected.
    pub fn new(
        features: Array2<f64>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        label: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::InvalidGraph("graph must have at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) out of range for {n} nodes"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop on node {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let neighbors = adjacency_lists(n, &edges);
        Ok(Graph {
            features,
            edges,
            label,
            neighbors,
        })
    }

    /// A graph with `n` nodes, zero features of width `feature_dim` and no edges.
    pub fn empty(n: usize, feature_dim: usize) -> Result<Self> {
        Graph::new(Array2::zeros((n, feature_dim)), [], 0)
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.binary_search(&(a.min(b), a.max(b))).is_ok()
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = label;
        self
    }

    pub fn set_label(&mut self, label: usize) {
        self.label = label;
    }

    pub fn set_features(&mut self, features: Array2<f64>) -> Result<()> {
        if features.dim() != self.features.dim() {
            return Err(Error::Shape(format!(
                "features {:?} do not match graph {:?}",
                features.dim(),
                self.features.dim()
            )));
        }
        self.features = features;
        Ok(())
    }

    pub fn features_mut(&mut self) -> &mut Array2<f64> {
        &mut self.features
    }

    pub fn degree(&self) -> DegreeVector {
        DegreeVector(self.neighbors.iter().map(Vec::len).collect())
    }

    /// Dense `D^-1/2 (A + I) D^-1/2` where `D` is the degree matrix of `A + I`.
    pub fn normalized_adjacency(&self) -> Array2<f64> {
        let n = self.num_nodes();
        let inv_sqrt: Vec<f64> = self
            .neighbors
            .iter()
            .map(|nb| 1.0 / ((nb.len() + 1) as f64).sqrt())
            .collect();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            out[[i, i]] = inv_sqrt[i] * inv_sqrt[i];
        }
        for &(a, b) in &self.edges {
            let w = inv_sqrt[a] * inv_sqrt[b];
            out[[a, b]] = w;
            out[[b, a]] = w;
        }
        out
    }

    /// Renames node `i` to `permutation[i]`. Features, edges and degrees move with
    /// their nodes; the label is untouched.
    pub fn relabel_nodes(&self, permutation: &[usize]) -> Result<Graph> {
        let n = self.num_nodes();
        if permutation.len() != n {
            return Err(Error::InvalidGraph(format!(
                "permutation has {} entries for {n} nodes",
                permutation.len()
            )));
        }
        let mut seen = vec![false; n];
        for &p in permutation {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidGraph("permutation is not a bijection".into()));
            }
        }
        let mut features = Array2::zeros(self.features.dim());
        for (i, &p) in permutation.iter().enumerate() {
            features.row_mut(p).assign(&self.features.row(i));
        }
        let edges = self
            .edges
            .iter()
            .map(|&(a, b)| (permutation[a], permutation[b]));
        Graph::new(features, edges, self.label)
    }

    /// Induced subgraph on `keep` (in the given order); node `keep[k]` becomes node `k`.
    pub fn induced_subgraph(&self, keep: &[usize]) -> Result<Graph> {
        let mut index = vec![usize::MAX; self.num_nodes()];
        for (k, &v) in keep.iter().enumerate() {
            index[v] = k;
        }
        let mut features = Array2::zeros((keep.len(), self.feature_dim()));
        for (k, &v) in keep.iter().enumerate() {
            features.row_mut(k).assign(&self.features.row(v));
        }
        let edges = self
            .edges
            .iter()
            .filter(|&&(a, b)| index[a] != usize::MAX && index[b] != usize::MAX)
            .map(|&(a, b)| (index[a], index[b]));
        Graph::new(features, edges, self.label)
    }
}

fn adjacency_lists(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); n];
    for &(a, b) in edges {
        lists[a].push(b);
        lists[b].push(a);
    }
    for l in &mut lists {
        l.sort_unstable();
    }
    lists
}

/// Samples each of the `n(n-1)/2` unordered pairs independently with probability `p_edge`.
pub fn er_edges<R: Rng + ?Sized>(n: usize, p_edge: f64, rng: &mut R) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_bool(p_edge) {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Erdős–Rényi `G(n, p)` graph with zero features of width `feature_dim` and label 0.
pub fn er_random_graph(n: usize, p_edge: f64, feature_dim: usize, seed: u64) -> Result<Graph> {
    if n == 0 {
        return Err(Error::InvalidGraph("ER graph needs n >= 1".into()));
    }
    if !(0.0..=1.0).contains(&p_edge) {
        return Err(Error::Config(format!("edge probability {p_edge} not in [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = er_edges(n, p_edge, &mut rng);
    Graph::new(Array2::zeros((n, feature_dim)), edges, 0)
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    num_nodes: usize,
    feature_dim: usize,
    features: Vec<f64>,
    edges: Vec<(usize, usize)>,
    label: usize,
}

impl From<Graph> for GraphRepr {
    fn from(g: Graph) -> Self {
        GraphRepr {
            num_nodes: g.num_nodes(),
            feature_dim: g.feature_dim(),
            features: g.features.iter().copied().collect(),
            edges: g.edges,
            label: g.label,
        }
    }
}

impl TryFrom<GraphRepr> for Graph {
    type Error = Error;

    fn try_from(r: GraphRepr) -> Result<Self> {
        let features = Array2::from_shape_vec((r.num_nodes, r.feature_dim), r.features)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Graph::new(features, r.edges, r.label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path3() -> Graph {
        Graph::new(Array2::zeros((3, 1)), [(0, 1), (1, 2)], 0).unwrap()
    }

    #[test]
    fn degree_examples() {
        assert_eq!(path3().degree().0, vec![1, 2, 1]);
        assert_eq!(Graph::empty(1, 2).unwrap().degree().0, vec![0]);
        let k3 = er_random_graph(3, 1.0, 1, 0).unwrap();
        assert_eq!(k3.degree().0, vec![2, 2, 2]);
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(Graph::new(Array2::zeros((2, 1)), [(0, 2)], 0).is_err());
        assert!(Graph::new(Array2::zeros((2, 1)), [(1, 1)], 0).is_err());
        assert!(Graph::new(Array2::zeros((0, 1)), [], 0).is_err());
    }

    #[test]
    fn duplicate_and_reversed_edges_collapse() {
        let g = Graph::new(Array2::zeros((2, 1)), [(0, 1), (1, 0), (0, 1)], 0).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn normalized_adjacency_examples() {
        let single = Graph::empty(1, 1).unwrap().normalized_adjacency();
        assert_eq!(single[[0, 0]], 1.0);

        let pair = Graph::new(Array2::zeros((2, 1)), [(0, 1)], 0).unwrap();
        let a = pair.normalized_adjacency();
        for v in a.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }

        let a = path3().normalized_adjacency();
        assert!((a[[0, 1]] - 1.0 / 6f64.sqrt()).abs() < 1e-12);
        assert!((a[[0, 1]] - 0.4082).abs() < 1e-4);
        assert_eq!(a[[0, 2]], 0.0);
    }

    #[test]
    fn er_extremes_and_determinism() {
        assert_eq!(er_random_graph(4, 0.0, 1, 3).unwrap().num_edges(), 0);
        assert_eq!(er_random_graph(4, 1.0, 1, 3).unwrap().num_edges(), 6);
        let a = er_random_graph(10, 0.5, 1, 7).unwrap();
        let b = er_random_graph(10, 0.5, 1, 7).unwrap();
        assert_eq!(a, b);
        assert!(er_random_graph(3, 1.5, 1, 0).is_err());
    }

    #[test]
    fn relabel_identity_and_swap() {
        let g = path3();
        assert_eq!(g.relabel_nodes(&[0, 1, 2]).unwrap(), g);
        let swapped = g.relabel_nodes(&[2, 1, 0]).unwrap();
        let mut d = swapped.degree().0;
        d.sort();
        assert_eq!(d, vec![1, 1, 2]);
        assert!(g.relabel_nodes(&[0, 0, 1]).is_err());
        assert!(g.relabel_nodes(&[0, 1]).is_err());
    }

    #[test]
    fn induced_subgraph_compacts_indices() {
        let g = er_random_graph(5, 1.0, 1, 0).unwrap();
        let sub = g.induced_subgraph(&[4, 1, 3]).unwrap();
        assert_eq!(sub.num_nodes(), 3);
        assert_eq!(sub.num_edges(), 3);
    }

    /// Largest eigenvalue magnitude by power iteration.
    fn spectral_radius(m: &Array2<f64>) -> f64 {
        let n = m.nrows();
        let mut v = ndarray::Array1::from_iter((0..n).map(|i| 1.0 + i as f64 * 0.37));
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = m.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm / v.dot(&v).sqrt();
            v = w / norm;
        }
        lambda
    }

    proptest! {
        #[test]
        fn degree_sum_is_twice_edge_count(n in 1usize..30, p in 0.0f64..=1.0, seed in any::<u64>()) {
            let g = er_random_graph(n, p, 2, seed).unwrap();
            prop_assert_eq!(g.degree().0.iter().sum::<usize>(), 2 * g.num_edges());
        }

        #[test]
        fn normalized_adjacency_symmetric_and_contractive(n in 1usize..15, p in 0.0f64..=1.0, seed in any::<u64>()) {
            let g = er_random_graph(n, p, 1, seed).unwrap();
            let a = g.normalized_adjacency();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(a[[i, j]], a[[j, i]]);
                    prop_assert_eq!(a[[i, j]] != 0.0, i == j || g.has_edge(i, j));
                }
            }
            prop_assert!(spectral_radius(&a) <= 1.0 + 1e-9);
        }

        #[test]
        fn relabel_commutes_with_degree(n in 1usize..20, p in 0.0f64..=1.0, seed in any::<u64>(), shuffle_seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let g = er_random_graph(n, p, 1, seed).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            let h = g.relabel_nodes(&perm).unwrap();
            let (dg, dh) = (g.degree(), h.degree());
            for i in 0..n {
                prop_assert_eq!(dh.0[perm[i]], dg.0[i]);
            }
        }
    }
}
