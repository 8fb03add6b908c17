//! Inter-layer relation samples and the relation-congruence loss.
//!
//! For a layer pair `(i, j)` every node contributes the unit vector
//! `(F_i[v] - F_j[v]) / |F_i[v] - F_j[v]|`; the teacher's and student's samples are
//! compared with sliced W2.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::wasserstein::{random_directions, sliced_w2_and_grad};
use crate::error::{Error, Result};
use crate::gnn::ActivationTrace;

/// One unit-norm (or exactly zero) difference vector per node.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationSamples(pub Array2<f64>);

impl RelationSamples {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

pub fn relation_samples(f_i: ArrayView2<f64>, f_j: ArrayView2<f64>) -> Result<RelationSamples> {
    if f_i.dim() != f_j.dim() {
        return Err(Error::Shape(format!(
            "relation needs equal layer shapes, got {:?} and {:?}",
            f_i.dim(),
            f_j.dim()
        )));
    }
    let mut r = &f_i - &f_j;
    for mut row in r.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    Ok(RelationSamples(r))
}

/// Pulls a gradient on the relation samples back to `u = F_i - F_j`.
fn relation_backward(f_i: &Array2<f64>, f_j: &Array2<f64>, dr: ArrayView2<f64>) -> Array2<f64> {
    let u = f_i - f_j;
    let mut du = Array2::zeros(u.raw_dim());
    for ((urow, drow), mut out) in u.rows().into_iter().zip(dr.rows()).zip(du.rows_mut()) {
        let norm = urow.dot(&urow).sqrt();
        if norm == 0.0 {
            continue;
        }
        let r = &urow / norm;
        let proj = r.dot(&drow);
        out.assign(&((&drow - &(&r * proj)) / norm));
    }
    du
}

/// Which layer pairs enter the relation-congruence loss. Indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerPairs {
    /// Every pair `i < j`.
    #[default]
    Full,
    /// `(i, i + k)` for each valid `i`.
    Offset(usize),
    Explicit(Vec<(usize, usize)>),
}

impl LayerPairs {
    /// Zero-based pairs for a model with `num_layers` message-passing layers.
    pub fn resolve(&self, num_layers: usize) -> Result<Vec<(usize, usize)>> {
        let pairs: Vec<(usize, usize)> = match self {
            LayerPairs::Full => (0..num_layers)
                .flat_map(|i| ((i + 1)..num_layers).map(move |j| (i, j)))
                .collect(),
            LayerPairs::Offset(k) => {
                if *k == 0 || *k >= num_layers {
                    return Err(Error::Config(format!(
                        "pair offset {k} invalid for {num_layers} layers"
                    )));
                }
                (0..num_layers - k).map(|i| (i, i + k)).collect()
            }
            LayerPairs::Explicit(list) => list
                .iter()
                .map(|&(i, j)| {
                    if i == 0 || j == 0 || i > num_layers || j > num_layers || i == j {
                        Err(Error::Config(format!(
                            "invalid layer pair ({i}, {j}) for {num_layers} layers"
                        )))
                    } else {
                        Ok((i - 1, j - 1))
                    }
                })
                .collect::<Result<_>>()?,
        };
        if pairs.is_empty() {
            return Err(Error::Config("no layer pairs selected".into()));
        }
        Ok(pairs)
    }
}

/// Node samples for `pair` pooled over all traces, in trace order.
fn pooled_samples(traces: &[ActivationTrace], (i, j): (usize, usize)) -> Result<Array2<f64>> {
    let parts: Vec<Array2<f64>> = traces
        .iter()
        .map(|t| relation_samples(t.layers[i].view(), t.layers[j].view()).map(|r| r.0))
        .collect::<Result<_>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

fn check_traces(traces_t: &[ActivationTrace], traces_s: &[ActivationTrace]) -> Result<()> {
    if traces_t.is_empty() {
        return Err(Error::Empty("relation loss needs at least one trace"));
    }
    if traces_t.len() != traces_s.len() {
        return Err(Error::Shape("teacher and student trace counts differ".into()));
    }
    for (t, s) in traces_t.iter().zip(traces_s) {
        super::attention::check_congruent(t, s)?;
    }
    Ok(())
}

/// Sum over `pairs` of sliced W2 between teacher and student relation samples, pooled
/// over the given traces. Slice directions come from `seed`.
pub fn relation_congruence_loss(
    traces_t: &[ActivationTrace],
    traces_s: &[ActivationTrace],
    pairs: &LayerPairs,
    num_slices: usize,
    seed: u64,
) -> Result<f64> {
    Ok(relation_congruence_loss_and_grads(traces_t, traces_s, pairs, num_slices, seed)?.0)
}

/// The loss plus, per student trace, the gradient with respect to each layer's activations.
pub(crate) fn relation_congruence_loss_and_grads(
    traces_t: &[ActivationTrace],
    traces_s: &[ActivationTrace],
    pairs: &LayerPairs,
    num_slices: usize,
    seed: u64,
) -> Result<(f64, Vec<Vec<Array2<f64>>>)> {
    check_traces(traces_t, traces_s)?;
    if num_slices == 0 {
        return Err(Error::Config("need at least one slice".into()));
    }
    let k = traces_s[0].layers.len();
    let pairs = pairs.resolve(k)?;
    let dim = traces_s[0].layers[0].ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions = random_directions(dim, num_slices, &mut rng);

    let mut grads: Vec<Vec<Array2<f64>>> = traces_s
        .iter()
        .map(|t| t.layers.iter().map(|f| Array2::zeros(f.raw_dim())).collect())
        .collect();
    let mut total = 0.0;
    for &(i, j) in &pairs {
        let rt = pooled_samples(traces_t, (i, j))?;
        let rs = pooled_samples(traces_s, (i, j))?;
        let (value, dr) = sliced_w2_and_grad(rt.view(), rs.view(), directions.view())?;
        total += value;
        if value == 0.0 {
            continue;
        }
        let mut offset = 0;
        for (t, g) in traces_s.iter().zip(grads.iter_mut()) {
            let n = t.num_nodes();
            let du = relation_backward(&t.layers[i], &t.layers[j], dr.slice(ndarray::s![offset..offset + n, ..]));
            g[i] += &du;
            g[j] -= &du;
            offset += n;
        }
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_layers_give_zero_rows() {
        let f = array![[1.0, 2.0], [0.0, 3.0]];
        let r = relation_samples(f.view(), f.view()).unwrap();
        assert!(r.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pythagorean_row() {
        let r = relation_samples(array![[3.0, 4.0]].view(), array![[0.0, 0.0]].view()).unwrap();
        assert!((r.0[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((r.0[[0, 1]] - 0.8).abs() < 1e-15);
        assert!(relation_samples(array![[1.0]].view(), array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn pair_enumeration() {
        assert_eq!(LayerPairs::Full.resolve(3).unwrap(), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(
            LayerPairs::Offset(1).resolve(4).unwrap(),
            vec![(0, 1), (1, 2), (2, 3)]
        );
        assert_eq!(LayerPairs::Offset(2).resolve(3).unwrap(), vec![(0, 2)]);
        assert!(LayerPairs::Offset(3).resolve(3).is_err());
        assert!(LayerPairs::Offset(0).resolve(3).is_err());
        assert!(LayerPairs::Explicit(vec![(1, 4)]).resolve(3).is_err());
        assert!(LayerPairs::Explicit(vec![(0, 1)]).resolve(3).is_err());
        assert_eq!(LayerPairs::Explicit(vec![(1, 3)]).resolve(3).unwrap(), vec![(0, 2)]);
    }

    #[test]
    fn identical_traces_have_zero_loss() {
        let t = ActivationTrace::from_layers(vec![
            array![[1.0, 0.0], [0.5, 2.0]],
            array![[0.0, 1.0], [1.0, 1.0]],
            array![[2.0, 1.0], [0.0, 0.0]],
        ]);
        let traces = vec![t.clone(), t];
        let l = relation_congruence_loss(&traces, &traces, &LayerPairs::Full, 16, 0).unwrap();
        assert_eq!(l, 0.0);
    }
}
