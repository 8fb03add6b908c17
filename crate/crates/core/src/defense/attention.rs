//! Degree-weighted attention maps over node activations and the attention-transfer loss.

use ndarray::{Array1, Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::gnn::ActivationTrace;
use crate::graph::DegreeVector;

/// Non-negative per-node saliency for one layer of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(pub Array1<f64>);

impl AttentionMap {
    pub fn scores(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.dot(&self.0).sqrt()
    }
}

/// `deg(v) / max(deg)`, or 1 everywhere on an edgeless graph.
pub(crate) fn degree_weights(degrees: &DegreeVector) -> Array1<f64> {
    let max = degrees.max();
    if max == 0 {
        return Array1::ones(degrees.len());
    }
    degrees.as_slice().iter().map(|&d| d as f64 / max as f64).collect()
}

/// `score[v] = deg(v)/max(deg) * sum_c |F[v, c]|^p`.
pub fn attention_map(activations: ArrayView2<f64>, degrees: &DegreeVector, p: f64) -> Result<AttentionMap> {
    if degrees.len() != activations.nrows() {
        return Err(Error::Shape(format!(
            "{} degrees for {} activation rows",
            degrees.len(),
            activations.nrows()
        )));
    }
    if !(p >= 1.0) {
        return Err(Error::Config(format!("attention exponent p = {p} must be >= 1")));
    }
    let w = degree_weights(degrees);
    let scores = activations
        .rows()
        .into_iter()
        .zip(w.iter())
        .map(|(row, &wv)| wv * row.iter().map(|x| x.abs().powf(p)).sum::<f64>())
        .collect();
    Ok(AttentionMap(scores))
}

/// Scales the map to unit L2 norm. The zero map is returned unchanged.
pub fn normalize_attention(map: &AttentionMap) -> AttentionMap {
    let norm = map.norm();
    if norm == 0.0 {
        return map.clone();
    }
    AttentionMap(&map.0 / norm)
}

/// `|| psi(A(F_T^l)) - psi(A(F_S^l)) ||_2` summed over every message-passing layer.
pub fn attention_distill_loss(
    teacher: &ActivationTrace,
    student: &ActivationTrace,
    degrees: &DegreeVector,
    p: f64,
) -> Result<f64> {
    check_congruent(teacher, student)?;
    let mut total = 0.0;
    for (ft, fs) in teacher.layers.iter().zip(&student.layers) {
        let nt = normalize_attention(&attention_map(ft.view(), degrees, p)?);
        let ns = normalize_attention(&attention_map(fs.view(), degrees, p)?);
        total += (&nt.0 - &ns.0).mapv(|x| x * x).sum().sqrt();
    }
    Ok(total)
}

pub(crate) fn check_congruent(teacher: &ActivationTrace, student: &ActivationTrace) -> Result<()> {
    if teacher.layers.len() != student.layers.len() {
        return Err(Error::Shape(format!(
            "teacher has {} layers, student {}",
            teacher.layers.len(),
            student.layers.len()
        )));
    }
    for (a, b) in teacher.layers.iter().zip(&student.layers) {
        if a.dim() != b.dim() {
            return Err(Error::Shape(format!("layer shapes {:?} vs {:?}", a.dim(), b.dim())));
        }
    }
    Ok(())
}

/// One layer's attention-transfer term and its gradients with respect to the teacher
/// and student activations, in that order.
pub(crate) fn layer_loss_and_grads(
    ft: &Array2<f64>,
    fs: &Array2<f64>,
    weights: &Array1<f64>,
    p: f64,
) -> (f64, Array2<f64>, Array2<f64>) {
    let energy = |f: &Array2<f64>| -> Array1<f64> {
        f.rows()
            .into_iter()
            .zip(weights.iter())
            .map(|(row, &wv)| wv * row.iter().map(|x| x.abs().powf(p)).sum::<f64>())
            .collect()
    };
    let (at, as_) = (energy(ft), energy(fs));
    let (norm_t, norm_s) = (at.dot(&at).sqrt(), as_.dot(&as_).sqrt());
    let nt = if norm_t > 0.0 { &at / norm_t } else { at.clone() };
    let ns = if norm_s > 0.0 { &as_ / norm_s } else { as_.clone() };
    let diff = &ns - &nt;
    let loss = diff.dot(&diff).sqrt();
    if loss == 0.0 {
        return (0.0, Array2::zeros(ft.raw_dim()), Array2::zeros(fs.raw_dim()));
    }
    let g = &diff / loss;
    // d psi(a) / da = (I - n n^T) / |a|
    let through_norm = |n: &Array1<f64>, norm: f64, g: &Array1<f64>| -> Array1<f64> {
        if norm == 0.0 {
            return Array1::zeros(n.len());
        }
        (g - &(n * n.dot(g))) / norm
    };
    let da_s = through_norm(&ns, norm_s, &g);
    let da_t = through_norm(&nt, norm_t, &(-&g));
    let through_energy = |f: &Array2<f64>, da: &Array1<f64>| -> Array2<f64> {
        let mut out = Array2::zeros(f.raw_dim());
        Zip::from(out.rows_mut())
            .and(f.rows())
            .and(da)
            .and(weights)
            .for_each(|mut o, row, &d, &wv| {
                Zip::from(&mut o).and(&row).for_each(|o, &x| {
                    if x != 0.0 {
                        *o = d * wv * p * x.abs().powf(p - 1.0) * x.signum();
                    }
                });
            });
        out
    };
    (loss, through_energy(ft, &da_t), through_energy(fs, &da_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_evaluated_map() {
        let f = array![[1.0, 2.0], [3.0, 4.0]];
        let a = attention_map(f.view(), &DegreeVector(vec![1, 1]), 2.0).unwrap();
        assert_eq!(a.0, array![5.0, 25.0]);
    }

    #[test]
    fn degree_factor_and_edgeless_graph() {
        let f = array![[1.0], [1.0], [1.0]];
        let a = attention_map(f.view(), &DegreeVector(vec![1, 2, 0]), 1.0).unwrap();
        assert_eq!(a.0, array![0.5, 1.0, 0.0]);
        let a = attention_map(f.view(), &DegreeVector(vec![0, 0, 0]), 3.0).unwrap();
        assert_eq!(a.0, array![1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_activations_and_bad_inputs() {
        let f = Array2::<f64>::zeros((3, 4));
        let d = DegreeVector(vec![1, 2, 1]);
        for p in [1.0, 2.0, 3.5] {
            assert!(attention_map(f.view(), &d, p).unwrap().0.iter().all(|&x| x == 0.0));
        }
        assert!(attention_map(f.view(), &DegreeVector(vec![1]), 2.0).is_err());
        assert!(attention_map(f.view(), &d, 0.5).is_err());
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_attention(&AttentionMap(array![3.0, 4.0]));
        assert!((n.0[0] - 0.6).abs() < 1e-15 && (n.0[1] - 0.8).abs() < 1e-15);
        let z = normalize_attention(&AttentionMap(array![0.0, 0.0, 0.0]));
        assert_eq!(z.0, array![0.0, 0.0, 0.0]);
    }

    #[test]
    fn orthogonal_maps_give_sqrt_two() {
        let t = ActivationTrace::from_layers(vec![array![[1.0], [0.0]]]);
        let s = ActivationTrace::from_layers(vec![array![[0.0], [1.0]]]);
        let d = DegreeVector(vec![1, 1]);
        let l = attention_distill_loss(&t, &s, &d, 2.0).unwrap();
        assert!((l - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(attention_distill_loss(&t, &t, &d, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn layer_count_mismatch() {
        let t = ActivationTrace::from_layers(vec![array![[1.0]], array![[1.0]]]);
        let s = ActivationTrace::from_layers(vec![array![[1.0]]]);
        assert!(attention_distill_loss(&t, &s, &DegreeVector(vec![0]), 2.0).is_err());
    }
}
