//! Conversions between complex matrices and stacked real/imaginary channels.
//!
//! The backbone consumes real tensors of shape `(2, F, T)`; losses and the
//! probability path work on the complex `(F, T)` view.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use num_complex::Complex64;

/// Complex `(F, T)` -> real `(2, F, T)` with channel 0 = real, 1 = imaginary.
pub fn complex_to_channels(c: &Array2<Complex64>) -> Array3<f64> {
    let (f, t) = c.dim();
    let mut out = Array3::zeros((2, f, t));
    for ((i, j), z) in c.indexed_iter() {
        out[(0, i, j)] = z.re;
        out[(1, i, j)] = z.im;
    }
    out
}

/// Real `(2, F, T)` -> complex `(F, T)`.
pub fn channels_to_complex(r: &Array3<f64>) -> Array2<Complex64> {
    let (two, f, t) = r.dim();
    assert_eq!(two, 2, "expected 2 channels, got {two}");
    Array2::from_shape_fn((f, t), |(i, j)| Complex64::new(r[(0, i, j)], r[(1, i, j)]))
}

pub fn complex_to_dyn(c: &Array2<Complex64>) -> ArrayD<f64> {
    complex_to_channels(c).into_dyn()
}

pub fn dyn_to_complex(r: &ArrayD<f64>) -> Array2<Complex64> {
    let v = r
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("expected a (2, F, T) tensor");
    channels_to_complex(&v.to_owned())
}

/// Mean squared complex residual: `mean_ij |a_ij - b_ij|^2`, the complex
/// squared error being `re^2 + im^2`.
pub fn mean_sq_complex_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let n = a.len().max(1);
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        / n as f64
}

/// 0-d scalar tensor.
pub fn scalar(x: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), x)
}
