use crate::{Error, Matrix, Result, MASK_SENTINEL};

/// Row-wise top-k selection: exactly `k` selected columns per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopKMask {
    rows: usize,
    cols: usize,
    k: usize,
    selected: Vec<bool>,
}

impl TopKMask {
    /// Everything selected (`k = cols`).
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            k: cols,
            selected: vec![true; rows * cols],
        }
    }

    /// Builds a mask from per-row column lists; each list must hold `k`
    /// distinct in-range columns.
    pub fn from_indices(rows: usize, cols: usize, lists: &[Vec<usize>]) -> Result<Self> {
        if lists.len() != rows {
            return Err(Error::IndexOutOfRange {
                index: lists.len(),
                len: rows,
            });
        }
        let k = lists.first().map_or(0, Vec::len);
        if k == 0 || k > cols {
            return Err(Error::KOutOfRange { k, n: cols });
        }
        let mut selected = vec![false; rows * cols];
        for (i, list) in lists.iter().enumerate() {
            if list.len() != k {
                return Err(Error::KOutOfRange { k: list.len(), n: cols });
            }
            for &j in list {
                if j >= cols {
                    return Err(Error::IndexOutOfRange { index: j, len: cols });
                }
                if std::mem::replace(&mut selected[i * cols + j], true) {
                    return Err(Error::config(format!("duplicate column {j} in row {i}")));
                }
            }
        }
        Ok(Self { rows, cols, k, selected })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn is_selected(&self, i: usize, j: usize) -> bool {
        self.selected[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.selected[i * self.cols..(i + 1) * self.cols]
    }

    /// Selected columns of row `i`, ascending.
    pub fn row_indices(&self, i: usize) -> Vec<usize> {
        self.row(i)
            .iter()
            .enumerate()
            .filter_map(|(j, &s)| s.then_some(j))
            .collect()
    }

    pub fn is_full(&self) -> bool {
        self.k == self.cols
    }

    /// Replaces unselected entries of `scores` with the mask sentinel.
    pub fn apply(&self, scores: &Matrix) -> Result<Matrix> {
        if scores.shape() != (self.rows, self.cols) {
            return Err(Error::Shape {
                op: "mask apply",
                left: (self.rows, self.cols),
                right: scores.shape(),
            });
        }
        let mut out = scores.clone();
        for (x, &keep) in out.as_mut_slice().iter_mut().zip(&self.selected) {
            if !keep {
                *x = MASK_SENTINEL;
            }
        }
        Ok(out)
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        Err(Error::KOutOfRange { k, n })
    } else {
        Ok(())
    }
}

/// Selects the `k` largest entries of every row. Ties go to the lowest
/// column index, the same order a stable descending sort would give.
pub fn row_topk_mask(scores: &Matrix, k: usize) -> Result<TopKMask> {
    let (rows, cols) = scores.shape();
    check_k(k, cols)?;
    if let Some((row, col)) = scores.find_non_finite() {
        return Err(Error::NonFinite {
            context: "row_topk_mask",
            row,
            col,
        });
    }
    if k == cols {
        return Ok(TopKMask::full(rows, cols));
    }
    let mut selected = vec![false; rows * cols];
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for i in 0..rows {
        let row = scores.row(i);
        order.clear();
        order.extend(0..cols);
        order.select_nth_unstable_by(k - 1, |&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in &order[..k] {
            selected[i * cols + j] = true;
        }
    }
    Ok(TopKMask { rows, cols, k, selected })
}

/// Smallest gap, over rows, between the k-th and (k+1)-th largest score.
/// `inf` when `k` equals the row length. A zero margin means a tie sits on
/// the selection boundary.
pub fn selection_margin(scores: &Matrix, k: usize) -> Result<f64> {
    check_k(k, scores.cols())?;
    if k == scores.cols() {
        return Ok(f64::INFINITY);
    }
    let mut margin = f64::INFINITY;
    let mut buf = Vec::with_capacity(scores.cols());
    for i in 0..scores.rows() {
        buf.clear();
        buf.extend_from_slice(scores.row(i));
        buf.sort_by(|a, b| b.total_cmp(a));
        margin = margin.min(buf[k - 1] - buf[k]);
    }
    Ok(margin)
}
