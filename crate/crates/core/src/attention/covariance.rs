use super::{project_qkv, score_scale, ProjectionWeights, TopKMask};
use crate::numerics::softmax_in_place;
use crate::{Error, Matrix, Result, MASK_SENTINEL};

/// Covariance of the rows of `x` under probability weights `a`:
/// `Σ aₜ xₜᵀxₜ − (Σ aₜ xₜ)ᵀ(Σ aₜ xₜ)`.
pub fn weighted_covariance(x: &Matrix, a: &[f64]) -> Result<Matrix> {
    if a.len() != x.rows() {
        return Err(Error::Shape {
            op: "weighted_covariance",
            left: x.shape(),
            right: (a.len(), 1),
        });
    }
    if let Some(t) = a.iter().position(|&w| w.is_nan() || w < 0.0 || !w.is_finite()) {
        return Err(Error::NotDistribution(format!("weight {t} is {}", a[t])));
    }
    let total: f64 = a.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::NotDistribution(format!("weights sum to {total}")));
    }
    let dm = x.cols();
    let mut mean = vec![0.0; dm];
    let mut second = Matrix::zeros(dm, dm);
    for (t, &w) in a.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let row = x.row(t);
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += w * v;
        }
        for p in 0..dm {
            let wp = w * row[p];
            for r in p..dm {
                second[(p, r)] += wp * row[r];
            }
        }
    }
    // Upper triangle, then mirrored so the result is exactly symmetric.
    for p in 0..dm {
        for r in p..dm {
            let c = second[(p, r)] - mean[p] * mean[r];
            second[(p, r)] = c;
            second[(r, p)] = c;
        }
    }
    Ok(second)
}

/// Attention row `l` of `softmax(mask(X W_Q (X W_K)ᵀ · s))`.
pub fn masked_attention_row(
    x: &Matrix,
    w: &ProjectionWeights,
    l: usize,
    mask: &TopKMask,
    temperature: f64,
) -> Result<Vec<f64>> {
    let (q, k, _) = project_qkv(x, w)?;
    if l >= q.rows() {
        return Err(Error::IndexOutOfRange {
            index: l,
            len: q.rows(),
        });
    }
    if mask.rows() != q.rows() || mask.cols() != k.rows() {
        return Err(Error::Shape {
            op: "lemma1 mask",
            left: (q.rows(), k.rows()),
            right: (mask.rows(), mask.cols()),
        });
    }
    let scale = score_scale(q.cols(), temperature);
    let mut row: Vec<f64> = (0..k.rows())
        .map(|t| {
            if mask.is_selected(l, t) {
                crate::numerics::dot(q.row(l), k.row(t)) * scale
            } else {
                MASK_SENTINEL
            }
        })
        .collect();
    softmax_in_place(&mut row).map_err(|_| Error::EmptyAttentionRow { row: l })?;
    Ok(row)
}

fn lemma1_parts(
    x: &Matrix,
    w: &ProjectionWeights,
    l: usize,
    (i, j): (usize, usize),
    mask: &TopKMask,
    temperature: f64,
) -> Result<(Matrix, f64)> {
    w.validate()?;
    if i >= w.d_model() {
        return Err(Error::IndexOutOfRange { index: i, len: w.d_model() });
    }
    if j >= w.d() {
        return Err(Error::IndexOutOfRange { index: j, len: w.d() });
    }
    let a = masked_attention_row(x, w, l, mask, temperature)?;
    let cov = weighted_covariance(x, &a)?;
    Ok((cov, score_scale(w.d(), temperature)))
}

/// `∂V̂_l / ∂W_Q[i, j] = s · x_{l,i} · W_K[:, j]ᵀ Var_{a_l}(x) W_V` (a `1 × d` row),
/// where `a_l` is the masked attention row and `s` the score scale.
pub fn lemma1_grad_wq_entry(
    x: &Matrix,
    w: &ProjectionWeights,
    l: usize,
    entry: (usize, usize),
    mask: &TopKMask,
    temperature: f64,
) -> Result<Matrix> {
    let (cov, scale) = lemma1_parts(x, w, l, entry, mask, temperature)?;
    let (i, j) = entry;
    let wk_col = Matrix::from_vec(1, w.d_model(), w.w_k.column(j))?;
    let g = wk_col.matmul(&cov)?.matmul(&w.w_v)?;
    Ok(g.scale(scale * x[(l, i)]))
}

/// `∂V̂_l / ∂W_K[i, j] = s · q_{l,j} · Var_{a_l}(x)[i, :] W_V`, with
/// `q_l = x_l W_Q`.
pub fn lemma1_grad_wk_entry(
    x: &Matrix,
    w: &ProjectionWeights,
    l: usize,
    entry: (usize, usize),
    mask: &TopKMask,
    temperature: f64,
) -> Result<Matrix> {
    let (cov, scale) = lemma1_parts(x, w, l, entry, mask, temperature)?;
    let (i, j) = entry;
    let q_lj = crate::numerics::dot(x.row(l), &w.w_q.column(j));
    let g = cov.row_matrix(i).matmul(&w.w_v)?;
    Ok(g.scale(scale * q_lj))
}
