//! Graph corpora: TUDataset text I/O, the synthetic two-class corpus and
//! stratified train/test/holdout splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{er_edges, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub graphs: Vec<Graph>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_classes: usize, graphs: Vec<Graph>) -> Result<Self> {
        let first = graphs.first().ok_or(Error::Empty("dataset has no graphs"))?;
        let feature_dim = first.feature_dim();
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        for (i, g) in graphs.iter().enumerate() {
            if g.feature_dim() != feature_dim {
                return Err(Error::Shape(format!(
                    "graph {i} has feature dim {} but dataset uses {feature_dim}",
                    g.feature_dim()
                )));
            }
            if g.label() >= num_classes {
                return Err(Error::Config(format!(
                    "graph {i} label {} out of range for {num_classes} classes",
                    g.label()
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            num_classes,
            feature_dim,
            graphs,
        })
    }

    /// A dataset sharing this one's metadata. Unlike [`Dataset::new`], `graphs` may be empty
    /// (e.g. a triggered set with no eligible graphs).
    pub fn with_graphs(&self, graphs: Vec<Graph>) -> Dataset {
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            graphs,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        self.with_graphs(indices.iter().map(|&i| self.graphs[i].clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn avg_nodes(&self) -> f64 {
        if self.graphs.is_empty() {
            return 0.0;
        }
        self.graphs.iter().map(|g| g.num_nodes() as f64).sum::<f64>() / self.graphs.len() as f64
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for g in &self.graphs {
            counts[g.label()] += 1;
        }
        counts
    }

    /// Drops graphs with more than `max_nodes` nodes and returns how many were removed.
    pub fn drop_oversized(&mut self, max_nodes: usize) -> usize {
        let before = self.graphs.len();
        self.graphs.retain(|g| g.num_nodes() <= max_nodes);
        before - self.graphs.len()
    }
}

fn tu_path(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.txt"))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::format(path, None, format!("cannot read file: {e}")))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect::<Vec<_>>())
}

/// Lines with trailing empty lines removed (files normally end with a newline).
fn content_lines(path: &Path) -> Result<Vec<String>> {
    let mut lines = read_lines(path)?;
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    Ok(lines)
}

fn parse_int(path: &Path, line_no: usize, s: &str) -> Result<i64> {
    s.trim()
        .parse::<i64>()
        .map_err(|_| Error::format(path, Some(line_no), format!("expected an integer, got {s:?}")))
}

/// Loads `{name}_A.txt`, `{name}_graph_indicator.txt`, `{name}_graph_labels.txt` and,
/// when present, `{name}_node_attributes.txt` or `{name}_node_labels.txt`.
///
/// Node attributes take precedence; otherwise node labels are one-hot encoded over
/// `0..=max_label` (shifted if negative labels occur). Without either file every node
/// gets the constant feature `[1.0]`. Graph labels are remapped to `0..num_classes` in
/// sorted order. Edges are symmetrised and deduplicated; self-loops are dropped.
pub fn load_tu_dataset(directory: impl AsRef<Path>, name: &str) -> Result<Dataset> {
    let dir = directory.as_ref();
    let indicator_path = tu_path(dir, name, "graph_indicator");
    let labels_path = tu_path(dir, name, "graph_labels");
    let a_path = tu_path(dir, name, "A");

    let indicator: Vec<usize> = content_lines(&indicator_path)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let id = parse_int(&indicator_path, i + 1, l)?;
            if id < 1 {
                return Err(Error::format(&indicator_path, Some(i + 1), "graph ids are 1-based"));
            }
            Ok(id as usize - 1)
        })
        .collect::<Result<_>>()?;
    let num_nodes = indicator.len();
    if num_nodes == 0 {
        return Err(Error::format(&indicator_path, None, "no nodes"));
    }
    if indicator.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::format(&indicator_path, None, "graph ids must be non-decreasing"));
    }

    let raw_labels: Vec<i64> = content_lines(&labels_path)?
        .iter()
        .enumerate()
        .map(|(i, l)| parse_int(&labels_path, i + 1, l))
        .collect::<Result<_>>()?;
    let num_graphs = raw_labels.len();
    if indicator[num_nodes - 1] + 1 != num_graphs {
        return Err(Error::format(
            &indicator_path,
            None,
            format!(
                "indicator names {} graphs but graph_labels has {num_graphs}",
                indicator[num_nodes - 1] + 1
            ),
        ));
    }

    // Node ranges per graph.
    let mut start = vec![usize::MAX; num_graphs];
    let mut count = vec![0usize; num_graphs];
    for (node, &g) in indicator.iter().enumerate() {
        if start[g] == usize::MAX {
            start[g] = node;
        }
        count[g] += 1;
    }
    if let Some(g) = count.iter().position(|&c| c == 0) {
        return Err(Error::format(&indicator_path, None, format!("graph {} has no nodes", g + 1)));
    }

    let features = load_node_features(dir, name, num_nodes)?;
    let feature_dim = features.ncols();

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (i, line) in content_lines(&a_path)?.iter().enumerate() {
        let line_no = i + 1;
        let mut parts = line.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::format(&a_path, Some(line_no), "expected \"i, j\""));
        };
        let a = parse_int(&a_path, line_no, a)?;
        let b = parse_int(&a_path, line_no, b)?;
        let in_range = |x: i64| x >= 1 && (x as usize) <= num_nodes;
        if !in_range(a) || !in_range(b) {
            return Err(Error::format(
                &a_path,
                Some(line_no),
                format!("dangling node index in ({a}, {b}); {num_nodes} nodes declared"),
            ));
        }
        let (a, b) = (a as usize - 1, b as usize - 1);
        let g = indicator[a];
        if indicator[b] != g {
            return Err(Error::format(&a_path, Some(line_no), "edge crosses graph boundary"));
        }
        if a != b {
            edges[g].push((a - start[g], b - start[g]));
        }
    }

    let label_map: BTreeMap<i64, usize> = raw_labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();

    let mut graphs = Vec::with_capacity(num_graphs);
    for (g, graph_edges) in edges.into_iter().enumerate() {
        let rows = start[g]..start[g] + count[g];
        let mut f = Array2::zeros((count[g], feature_dim));
        f.assign(&features.slice(ndarray::s![rows, ..]));
        graphs.push(Graph::new(f, graph_edges, label_map[&raw_labels[g]])?);
    }
    Dataset::new(name, label_map.len(), graphs)
}

fn load_node_features(dir: &Path, name: &str, num_nodes: usize) -> Result<Array2<f64>> {
    let attr_path = tu_path(dir, name, "node_attributes");
    let nl_path = tu_path(dir, name, "node_labels");
    if attr_path.exists() {
        let lines = read_lines(&attr_path)?;
        // An all-empty attribute file encodes zero-width features.
        let lines = &lines[..num_nodes.min(lines.len())];
        if lines.len() != num_nodes {
            return Err(Error::format(&attr_path, None, format!("expected {num_nodes} rows")));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(num_nodes);
        for (i, l) in lines.iter().enumerate() {
            let row = if l.trim().is_empty() {
                Vec::new()
            } else {
                l.split(',')
                    .map(|v| {
                        v.trim().parse::<f64>().map_err(|_| {
                            Error::format(&attr_path, Some(i + 1), format!("bad number {v:?}"))
                        })
                    })
                    .collect::<Result<_>>()?
            };
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::format(&attr_path, Some(i + 1), "ragged attribute row"));
                }
            }
            rows.push(row);
        }
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        return Array2::from_shape_vec((num_nodes, d), flat).map_err(|e| Error::Shape(e.to_string()));
    }
    if nl_path.exists() {
        let labels: Vec<i64> = content_lines(&nl_path)?
            .iter()
            .enumerate()
            .map(|(i, l)| parse_int(&nl_path, i + 1, l))
            .collect::<Result<_>>()?;
        if labels.len() != num_nodes {
            return Err(Error::format(&nl_path, None, format!("expected {num_nodes} node labels")));
        }
        let min = labels.iter().copied().min().unwrap_or(0).min(0);
        let max = labels.iter().copied().max().unwrap_or(0);
        let width = (max - min + 1) as usize;
        let mut f = Array2::zeros((num_nodes, width));
        for (v, &l) in labels.iter().enumerate() {
            f[[v, (l - min) as usize]] = 1.0;
        }
        return Ok(f);
    }
    Ok(Array2::ones((num_nodes, 1)))
}

/// Column index of the single `1.0` in every row, if features are a one-hot encoding
/// whose last column is used (so the width survives a reload).
fn one_hot_labels(dataset: &Dataset) -> Option<Vec<usize>> {
    let d = dataset.feature_dim;
    if d == 0 {
        return None;
    }
    let mut labels = Vec::new();
    let mut last_used = false;
    for g in &dataset.graphs {
        for row in g.features().rows() {
            let mut hot = None;
            for (c, &x) in row.iter().enumerate() {
                if x == 1.0 && hot.is_none() {
                    hot = Some(c);
                } else if x != 0.0 {
                    return None;
                }
            }
            let c = hot?;
            last_used |= c == d - 1;
            labels.push(c);
        }
    }
    last_used.then_some(labels)
}

/// Writes the dataset in the format [`load_tu_dataset`] reads, using `dataset.name` as
/// the file prefix. One-hot features go to `_node_labels.txt`, anything else to
/// `_node_attributes.txt`.
pub fn write_tu_dataset(dataset: &Dataset, directory: impl AsRef<Path>) -> Result<()> {
    let dir = directory.as_ref();
    fs::create_dir_all(dir)?;
    let name = &dataset.name;
    let create = |suffix: &str| -> Result<BufWriter<fs::File>> {
        Ok(BufWriter::new(fs::File::create(tu_path(dir, name, suffix))?))
    };
    // Remove a stale alternative feature file so the reload picks the right branch.
    for suffix in ["node_labels", "node_attributes"] {
        let p = tu_path(dir, name, suffix);
        if p.exists() {
            fs::remove_file(p)?;
        }
    }

    let mut a = create("A")?;
    let mut ind = create("graph_indicator")?;
    let mut gl = create("graph_labels")?;
    let mut offset = 0;
    for (gi, g) in dataset.graphs.iter().enumerate() {
        let mut pairs: Vec<(usize, usize)> = g
            .edges()
            .iter()
            .flat_map(|&(i, j)| [(i, j), (j, i)])
            .collect();
        pairs.sort_unstable();
        for (i, j) in pairs {
            writeln!(a, "{}, {}", i + offset + 1, j + offset + 1)?;
        }
        for _ in 0..g.num_nodes() {
            writeln!(ind, "{}", gi + 1)?;
        }
        writeln!(gl, "{}", g.label())?;
        offset += g.num_nodes();
    }
    a.flush()?;
    ind.flush()?;
    gl.flush()?;

    if let Some(labels) = one_hot_labels(dataset) {
        let mut nl = create("node_labels")?;
        for l in labels {
            writeln!(nl, "{l}")?;
        }
        nl.flush()?;
    } else {
        let mut na = create("node_attributes")?;
        for g in &dataset.graphs {
            for row in g.features().rows() {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
                writeln!(na, "{}", cells.join(", "))?;
            }
        }
        na.flush()?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    /// Fraction of the whole corpus handed to the defender, drawn from the test portion.
    pub clean_holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            clean_holdout_fraction: 0.03,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Subset of `test`.
    pub clean_holdout: Vec<usize>,
}

impl SplitIndices {
    /// Test indices not handed to the defender.
    pub fn evaluation(&self) -> Vec<usize> {
        let hold: BTreeSet<_> = self.clean_holdout.iter().collect();
        self.test.iter().copied().filter(|i| !hold.contains(i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub clean_holdout: Dataset,
    /// `test` minus `clean_holdout`.
    pub evaluation: Dataset,
    pub indices: SplitIndices,
}

/// Largest-remainder apportionment of `total` across `weights`, ties to the lower index.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut alloc: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut rem: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ((total * w) % sum, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - alloc.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        alloc[i] += 1;
    }
    alloc
}

pub fn split_indices(dataset: &Dataset, spec: &SplitSpec) -> Result<SplitIndices> {
    for (name, f) in [
        ("train_fraction", spec.train_fraction),
        ("clean_holdout_fraction", spec.clean_holdout_fraction),
    ] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("{name} = {f} must lie in (0, 1)")));
        }
    }
    let total = dataset.len();
    let n_train = (spec.train_fraction * total as f64).round() as usize;
    let n_test = total.saturating_sub(n_train);
    let n_hold = (spec.clean_holdout_fraction * total as f64).round() as usize;
    if n_train == 0 || n_test == 0 || n_hold == 0 || n_hold >= n_test {
        return Err(Error::Config(format!(
            "split of {total} graphs gives train={n_train}, test={n_test}, holdout={n_hold}; \
             every partition must be non-empty and the holdout smaller than the test set"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, g) in dataset.graphs.iter().enumerate() {
        by_class[g.label()].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let test_per_class = apportion(n_test, &sizes);
    let hold_per_class = apportion(n_hold, &test_per_class);

    let (mut train, mut test, mut hold) = (Vec::new(), Vec::new(), Vec::new());
    for ((members, &nt), &nh) in by_class.iter().zip(&test_per_class).zip(&hold_per_class) {
        test.extend_from_slice(&members[..nt]);
        hold.extend_from_slice(&members[..nh]);
        train.extend_from_slice(&members[nt..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    hold.sort_unstable();
    Ok(SplitIndices {
        train,
        test,
        clean_holdout: hold,
    })
}

/// Class-stratified split. Partition sizes are `round(fraction * total)`; the holdout is
/// drawn from the test indices only.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<DatasetSplit> {
    let indices = split_indices(dataset, spec)?;
    Ok(DatasetSplit {
        train: dataset.subset(&indices.train),
        test: dataset.subset(&indices.test),
        clean_holdout: dataset.subset(&indices.clean_holdout),
        evaluation: dataset.subset(&indices.evaluation()),
        indices,
    })
}

/// Width of the degree-bucket one-hot features of the synthetic corpus (buckets 0..=6, 7+).
pub const SYNTH_FEATURE_DIM: usize = 8;

/// One-hot degree buckets: column `min(deg, 7)`.
pub fn degree_bucket_features(graph: &Graph) -> Array2<f64> {
    let deg = graph.degree();
    let mut f = Array2::zeros((graph.num_nodes(), SYNTH_FEATURE_DIM));
    for (v, &d) in deg.as_slice().iter().enumerate() {
        f[[v, d.min(SYNTH_FEATURE_DIM - 1)]] = 1.0;
    }
    f
}

/// Desk-scale two-class corpus. Graph `i` has label `i % 2`; node counts are uniform in
/// `[15, 35]`. Class 0 is sparse `G(n, 0.1)`; class 1 is `G(n, 0.3)` with a planted 4-clique.
pub fn synth_dataset(num_graphs: usize, seed: u64) -> Result<Dataset> {
    if num_graphs < 20 {
        return Err(Error::Config(format!("synthetic corpus needs >= 20 graphs, got {num_graphs}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(num_graphs);
    for i in 0..num_graphs {
        let label = i % 2;
        let n = rng.random_range(15..=35);
        let mut edges = er_edges(n, if label == 0 { 0.1 } else { 0.3 }, &mut rng);
        if label == 1 {
            let clique: Vec<usize> = rand::seq::index::sample(&mut rng, n, 4).into_vec();
            for (k, &a) in clique.iter().enumerate() {
                for &b in &clique[k + 1..] {
                    edges.push((a, b));
                }
            }
        }
        let mut g = Graph::new(Array2::zeros((n, SYNTH_FEATURE_DIM)), edges, label)?;
        let f = degree_bucket_features(&g);
        g.set_features(f)?;
        graphs.push(g);
    }
    Dataset::new("synthetic", 2, graphs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_sums_and_is_proportional() {
        assert_eq!(apportion(20, &[50, 50]), vec![10, 10]);
        assert_eq!(apportion(3, &[10, 10]), vec![2, 1]);
        assert_eq!(apportion(5, &[0, 7]), vec![0, 5]);
        assert_eq!(apportion(4, &[1, 1, 1]).iter().sum::<usize>(), 4);
    }

    #[test]
    fn split_hundred_graphs() {
        let ds = synth_dataset(100, 3).unwrap();
        let spec = SplitSpec {
            train_fraction: 0.8,
            clean_holdout_fraction: 0.03,
            seed: 9,
        };
        let s = split(&ds, &spec).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.clean_holdout.len()), (80, 20, 3));
        assert_eq!(s.evaluation.len(), 17);
        assert_eq!(split_indices(&ds, &spec).unwrap(), s.indices);
    }

    #[test]
    fn split_rejects_empty_partitions() {
        let ds = synth_dataset(20, 0).unwrap();
        let bad = |train_fraction, clean_holdout_fraction| {
            split(&ds, &SplitSpec { train_fraction, clean_holdout_fraction, seed: 0 }).is_err()
        };
        assert!(bad(0.0, 0.1));
        assert!(bad(0.8, 0.01)); // round(0.2) = 0
        assert!(bad(0.99, 0.05)); // no test left
        assert!(bad(0.8, 0.2)); // holdout swallows the test set
        assert!(!bad(0.8, 0.1));
    }

    #[test]
    fn synth_is_balanced_and_deterministic() {
        let a = synth_dataset(400, 1).unwrap();
        assert_eq!(a.class_counts(), vec![200, 200]);
        assert_eq!(a, synth_dataset(400, 1).unwrap());
        assert!(a.graphs.iter().all(|g| (15..=35).contains(&g.num_nodes())));
        assert_eq!(a.feature_dim, SYNTH_FEATURE_DIM);
        assert!(synth_dataset(19, 1).is_err());
    }

    #[test]
    fn tu_label_remap() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        fs::write(p.join("T_A.txt"), "1, 2\n2, 1\n2, 3\n3, 2\n4, 5\n5, 4\n").unwrap();
        fs::write(p.join("T_graph_indicator.txt"), "1\n1\n1\n2\n2\n").unwrap();
        fs::write(p.join("T_graph_labels.txt"), "1\n2\n").unwrap();
        let ds = load_tu_dataset(p, "T").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.graphs[0].label(), 0);
        assert_eq!(ds.graphs[1].label(), 1);
        assert_eq!(ds.graphs[0].edges(), &[(0, 1), (1, 2)]);
        assert_eq!(ds.graphs[1].num_nodes(), 2);
        assert_eq!(ds.feature_dim, 1);
    }

    #[test]
    fn tu_errors_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        fs::write(p.join("T_graph_indicator.txt"), "1\n1\n2\n").unwrap();
        fs::write(p.join("T_graph_labels.txt"), "0\n1\n").unwrap();
        let err = load_tu_dataset(p, "T").unwrap_err().to_string();
        assert!(err.contains("T_A.txt"), "{err}");

        fs::write(p.join("T_A.txt"), "1, 2\n2, 9\n").unwrap();
        let err = load_tu_dataset(p, "T").unwrap_err();
        match err {
            Error::Format { line, ref file, .. } => {
                assert_eq!(line, Some(2));
                assert!(file.ends_with("T_A.txt"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn one_hot_features_use_node_labels_file() {
        let ds = synth_dataset(20, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_tu_dataset(&ds, dir.path()).unwrap();
        let has = |s| tu_path(dir.path(), "synthetic", s).exists();
        let uses_top_bucket = one_hot_labels(&ds).is_some();
        assert_eq!(has("node_labels"), uses_top_bucket);
        assert_eq!(has("node_attributes"), !uses_top_bucket);
        assert_eq!(load_tu_dataset(dir.path(), "synthetic").unwrap(), ds);
    }

    #[test]
    fn real_valued_features_round_trip() {
        let mut ds = synth_dataset(20, 2).unwrap();
        for g in &mut ds.graphs {
            g.features_mut().mapv_inplace(|x| x * 0.1 + 1.0 / 3.0);
        }
        let dir = tempfile::tempdir().unwrap();
        write_tu_dataset(&ds, dir.path()).unwrap();
        assert!(tu_path(dir.path(), "synthetic", "node_attributes").exists());
        assert_eq!(load_tu_dataset(dir.path(), "synthetic").unwrap(), ds);
    }

    /// Set `TU_DATA_DIR` to a directory holding the PROTEINS files to run this.
    #[test]
    fn proteins_statistics_when_available() {
        let Ok(dir) = std::env::var("TU_DATA_DIR") else {
            return;
        };
        let ds = load_tu_dataset(Path::new(&dir), "PROTEINS").unwrap();
        assert_eq!(ds.len(), 1113);
        assert!((ds.avg_nodes() - 39.06).abs() < 0.01);
    }
}
