use super::Matrix;
use crate::{Error, Result};

/// Marks a masked-out score. Softmax maps it to exactly zero weight.
///
/// The most negative finite `f64` is used instead of `-inf` so that any
/// arithmetic done on scores before normalisation stays NaN-free.
pub const MASK_SENTINEL: f64 = f64::MIN;

/// Normalises one row in place: `exp(x - max) / sum` over non-sentinel
/// entries, sentinels become `0.0`.
///
/// The sum runs in ascending index order, so a row and the same row with
/// masked entries removed normalise to bit-identical weights.
pub fn softmax_in_place(row: &mut [f64]) -> std::result::Result<(), SoftmaxRowError> {
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if x == MASK_SENTINEL {
            continue;
        }
        if !x.is_finite() {
            return Err(SoftmaxRowError::NonFinite(j));
        }
        if x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(SoftmaxRowError::Empty);
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = if *x == MASK_SENTINEL { 0.0 } else { (*x - max).exp() };
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftmaxRowError {
    Empty,
    NonFinite(usize),
}

/// Row-wise softmax with mask-sentinel support.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i)).map_err(|e| match e {
            SoftmaxRowError::Empty => Error::EmptyAttentionRow { row: i },
            SoftmaxRowError::NonFinite(j) => Error::NonFinite {
                context: "softmax_rows",
                row: i,
                col: j,
            },
        })?;
    }
    Ok(out)
}
