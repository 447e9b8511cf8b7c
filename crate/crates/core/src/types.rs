//! Shared scalar/matrix aliases and small norm helpers.

use ndarray::{Array1, Array2, ArrayView2};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CVec = Array1<C64>;
pub type CMat = Array2<C64>;

pub fn fro_norm(a: &ArrayView2<C64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn vec_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// ‖A − B‖_F without materializing the difference.
pub fn fro_dist(a: &ArrayView2<C64>, b: &ArrayView2<C64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt()
}
