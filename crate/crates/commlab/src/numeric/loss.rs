//! Loss primitives.

use crate::error::{Error, Result};
use crate::numeric::matrix::Matrix;

/// Mean squared error over all elements, with the gradient with respect
/// to the second argument: `2 (x' - x) / count`.
pub fn mse_loss(x: &Matrix, x_prime: &Matrix) -> Result<(f64, Matrix)> {
    if x.rows() != x_prime.rows() || x.cols() != x_prime.cols() {
        return Err(Error::shape(format!(
            "mse_loss shapes {}x{} vs {}x{}",
            x.rows(),
            x.cols(),
            x_prime.rows(),
            x_prime.cols()
        )));
    }
    let count = (x.rows() * x.cols()) as f64;
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut sum = 0.0;
    for i in 0..x.data().len() {
        let diff = x_prime.data()[i] - x.data()[i];
        sum += diff * diff;
        grad.data_mut()[i] = 2.0 * diff / count;
    }
    Ok((sum / count, grad))
}

/// Squared Euclidean norm of the difference of two equal-length slices.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
