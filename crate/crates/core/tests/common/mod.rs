#![allow(dead_code)]

use loda_core::numerics::thin_qr_rows;
use loda_core::SecondMoment;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn uniform_vec(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0))
}

/// r×d with orthonormal rows.
pub fn orthonormal_rows(r: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    thin_qr_rows(uniform(r, d, rng).view()).expect("random rows are independent")
}

/// Second moment of `n` random rows in `d` dimensions.
pub fn random_moment(n: usize, d: usize, rng: &mut ChaCha8Rng) -> SecondMoment {
    SecondMoment::from_features(uniform(n, d, rng).view()).unwrap()
}

/// Eigenvalues in descending order, computed by nalgebra.
pub fn reference_eigenvalues(s: ndarray::ArrayView2<f64>) -> Vec<f64> {
    let d = s.nrows();
    let m = nalgebra::DMatrix::from_fn(d, d, |i, j| s[[i, j]]);
    let mut v: Vec<f64> = nalgebra::SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
