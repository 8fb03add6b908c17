//! Sliced 2-Wasserstein distance between point clouds.
//!
//! Each slice projects both clouds onto a random unit direction; the 1D W2 between
//! equal-size samples is the RMS difference of their order statistics.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `num` directions drawn uniformly from the unit sphere in `dim` dimensions (rows).
pub fn random_directions<R: Rng + ?Sized>(dim: usize, num: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((num, dim));
    for mut row in out.rows_mut() {
        loop {
            row.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row /= norm;
                break;
            }
        }
    }
    out
}

fn check_inputs(t: &ArrayView2<f64>, s: &ArrayView2<f64>) -> Result<()> {
    if t.nrows() == 0 || s.nrows() == 0 {
        return Err(Error::Empty("sliced W2 needs non-empty sample sets"));
    }
    if t.ncols() != s.ncols() {
        return Err(Error::Shape(format!(
            "sample dimensions differ: {} vs {}",
            t.ncols(),
            s.ncols()
        )));
    }
    Ok(())
}

/// Sliced W2 with `num_slices` directions drawn from `seed`.
///
/// When the sets differ in size the larger one is subsampled without replacement to the
/// smaller size, using the same seeded stream (after the directions), so the result is
/// symmetric in its arguments.
pub fn sliced_w2(
    samples_t: ArrayView2<f64>,
    samples_s: ArrayView2<f64>,
    num_slices: usize,
    seed: u64,
) -> Result<f64> {
    check_inputs(&samples_t, &samples_s)?;
    if num_slices == 0 {
        return Err(Error::Config("need at least one slice".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = random_directions(samples_t.ncols(), num_slices, &mut rng);
    let (nt, ns) = (samples_t.nrows(), samples_s.nrows());
    if nt == ns {
        return sliced_w2_with_directions(samples_t, samples_s, dirs.view());
    }
    let (small, large) = if nt < ns { (samples_t, samples_s) } else { (samples_s, samples_t) };
    let mut keep = rand::seq::index::sample(&mut rng, large.nrows(), small.nrows()).into_vec();
    keep.sort_unstable();
    let sub = large.select(Axis(0), &keep);
    sliced_w2_with_directions(small, sub.view(), dirs.view())
}

/// Sliced W2 over fixed directions; both sets must have the same number of samples.
pub fn sliced_w2_with_directions(
    samples_t: ArrayView2<f64>,
    samples_s: ArrayView2<f64>,
    directions: ArrayView2<f64>,
) -> Result<f64> {
    Ok(sliced_w2_and_grad(samples_t, samples_s, directions)?.0)
}

fn sorted_order(x: &Array1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    idx
}

/// Sliced W2 and its gradient with respect to `samples_s` (directions held fixed).
pub(crate) fn sliced_w2_and_grad(
    samples_t: ArrayView2<f64>,
    samples_s: ArrayView2<f64>,
    directions: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    check_inputs(&samples_t, &samples_s)?;
    if samples_t.nrows() != samples_s.nrows() {
        return Err(Error::Shape("fixed-direction sliced W2 needs equal sample counts".into()));
    }
    if directions.ncols() != samples_t.ncols() || directions.nrows() == 0 {
        return Err(Error::Shape("direction matrix does not match sample dimension".into()));
    }
    let m = samples_t.nrows() as f64;
    let num_slices = directions.nrows() as f64;
    let proj_t = samples_t.dot(&directions.t());
    let proj_s = samples_s.dot(&directions.t());

    let mut mean_sq = 0.0;
    // d(mean_sq)/d(proj_s)
    let mut dproj = Array2::zeros(proj_s.raw_dim());
    for slice in 0..directions.nrows() {
        let pt = proj_t.column(slice).to_owned();
        let ps = proj_s.column(slice).to_owned();
        let (ot, os) = (sorted_order(&pt), sorted_order(&ps));
        let mut w = 0.0;
        for (&it, &is) in ot.iter().zip(&os) {
            let d = ps[is] - pt[it];
            w += d * d;
            dproj[[is, slice]] = 2.0 * d / (m * num_slices);
        }
        mean_sq += w / m;
    }
    mean_sq /= num_slices;
    let value = mean_sq.sqrt();
    if value == 0.0 {
        return Ok((0.0, Array2::zeros(samples_s.raw_dim())));
    }
    let grad = dproj.dot(&directions) / (2.0 * value);
    Ok((value, grad))
}
