//! Small shared numeric helpers.

use ndarray::Array2;

/// Inner product of two same-shaped images.
pub fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Squared Frobenius norm.
#[cfg(test)]
pub fn norm_sq(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Frobenius norm.
#[cfg(test)]
pub fn norm(a: &Array2<f64>) -> f64 {
    norm_sq(a).sqrt()
}

/// Largest absolute entry, 0 for an empty array.
pub fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}
