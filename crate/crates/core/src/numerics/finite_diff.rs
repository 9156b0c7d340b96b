use super::Matrix;
use crate::{Error, Result};

/// Central-difference gradient of a scalar function of a matrix:
/// `(f(x + h e_ij) - f(x - h e_ij)) / 2h` for every entry.
pub fn finite_diff_grad<F>(mut f: F, at: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut x = at.clone();
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    for i in 0..at.rows() {
        for j in 0..at.cols() {
            let orig = x[(i, j)];
            x[(i, j)] = orig + h;
            let plus = f(&x);
            x[(i, j)] = orig - h;
            let minus = f(&x);
            x[(i, j)] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: "finite_diff_grad",
                    row: i,
                    col: j,
                });
            }
            grad[(i, j)] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grad)
}
