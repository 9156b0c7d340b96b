use super::{row_topk_mask, ProjectionWeights, SelectionMetric, TopKMask};
use crate::numerics::{dot, softmax_in_place, softmax_rows};
use crate::{Error, Matrix, Result};

/// `1 / (√d · t)`. With `t = 1` this is exactly `1 / √d`.
pub fn score_scale(d: usize, temperature: f64) -> f64 {
    1.0 / ((d as f64).sqrt() * temperature)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// `A V`, `n × d_v`.
    pub output: Matrix,
    /// Row-stochastic `n × m` weights.
    pub attention: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnOutput {
    pub output: Matrix,
    /// Masked weights: exactly `k` nonzeros per row.
    pub attention: Matrix,
    pub mask: TopKMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlowKnnOutput {
    pub output: Matrix,
    /// Selected key indices per query, ascending.
    pub selected: Vec<Vec<usize>>,
    /// Softmax weights aligned with `selected`.
    pub weights: Vec<Vec<f64>>,
}

pub fn project_qkv(x: &Matrix, w: &ProjectionWeights) -> Result<(Matrix, Matrix, Matrix)> {
    w.validate()?;
    Ok((x.matmul(&w.w_q)?, x.matmul(&w.w_k)?, x.matmul(&w.w_v)?))
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix, temperature: f64) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::Shape {
            op: "attention q/k",
            left: q.shape(),
            right: k.shape(),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape {
            op: "attention k/v",
            left: k.shape(),
            right: v.shape(),
        });
    }
    if k.rows() == 0 {
        return Err(Error::config("attention needs at least one key"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// `Q Kᵀ · scale`, entry by entry as `dot(q_i, k_j) * scale`.
pub fn scaled_scores(q: &Matrix, k: &Matrix, temperature: f64) -> Result<Matrix> {
    let scale = score_scale(q.cols(), temperature);
    let mut s = q.matmul_nt(k)?;
    s.as_mut_slice().iter_mut().for_each(|x| *x *= scale);
    if let Some((row, col)) = s.find_non_finite() {
        return Err(Error::NonFinite {
            context: "attention scores",
            row,
            col,
        });
    }
    Ok(s)
}

pub fn dense_attention(q: &Matrix, k: &Matrix, v: &Matrix, temperature: f64) -> Result<AttentionOutput> {
    check_qkv(q, k, v, temperature)?;
    let attention = softmax_rows(&scaled_scores(q, k, temperature)?)?;
    let output = attention.matmul(v)?;
    Ok(AttentionOutput { output, attention })
}

/// Attention restricted to a fixed mask. Used wherever the selection is
/// held constant (gradient checks, frozen-mask backward).
pub fn masked_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &TopKMask,
    temperature: f64,
) -> Result<AttentionOutput> {
    check_qkv(q, k, v, temperature)?;
    let scores = scaled_scores(q, k, temperature)?;
    let attention = softmax_rows(&mask.apply(&scores)?)?;
    let output = attention.matmul(v)?;
    Ok(AttentionOutput { output, attention })
}

/// Fast k-NN attention: full score matrix, row-wise top-k mask, softmax,
/// multiply by `V`.
pub fn knn_attention_fast(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    top_k: usize,
    temperature: f64,
) -> Result<KnnOutput> {
    check_qkv(q, k, v, temperature)?;
    let scores = scaled_scores(q, k, temperature)?;
    let mask = row_topk_mask(&scores, top_k)?;
    let attention = softmax_rows(&mask.apply(&scores)?)?;
    let output = attention.matmul(v)?;
    Ok(KnnOutput { output, attention, mask })
}

/// Slow k-NN attention: for each query rank every key, gather the `k`
/// nearest keys and values, and attend over the gathered set only.
pub fn knn_attention_slow(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    top_k: usize,
    metric: SelectionMetric,
    temperature: f64,
) -> Result<SlowKnnOutput> {
    check_qkv(q, k, v, temperature)?;
    let m = k.rows();
    if top_k == 0 || top_k > m {
        return Err(Error::KOutOfRange { k: top_k, n: m });
    }
    let scale = score_scale(q.cols(), temperature);
    let mut output = Matrix::zeros(q.rows(), v.cols());
    let mut selected = Vec::with_capacity(q.rows());
    let mut weights = Vec::with_capacity(q.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        let key: Vec<f64> = match metric {
            SelectionMetric::Dot => (0..m).map(|j| dot(qi, k.row(j))).collect(),
            SelectionMetric::Euclidean => (0..m)
                .map(|j| {
                    let mut acc = 0.0;
                    for (a, b) in qi.iter().zip(k.row(j)) {
                        acc += (a - b) * (a - b);
                    }
                    acc
                })
                .collect(),
        };
        if let Some(j) = key.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "slow k-NN ranking",
                row: i,
                col: j,
            });
        }
        let mut order: Vec<usize> = (0..m).collect();
        match metric {
            SelectionMetric::Dot => order.sort_by(|&a, &b| key[b].total_cmp(&key[a])),
            SelectionMetric::Euclidean => order.sort_by(|&a, &b| key[a].total_cmp(&key[b])),
        }
        let mut chosen = order[..top_k].to_vec();
        chosen.sort_unstable();

        let keys = k.select_rows(&chosen);
        let values = v.select_rows(&chosen);
        let mut w: Vec<f64> = (0..top_k).map(|t| dot(qi, keys.row(t)) * scale).collect();
        softmax_in_place(&mut w).map_err(|_| Error::NonFinite {
            context: "slow k-NN scores",
            row: i,
            col: 0,
        })?;
        let out = output.row_mut(i);
        for (t, &wt) in w.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(values.row(t)) {
                *o += wt * x;
            }
        }
        selected.push(chosen);
        weights.push(w);
    }
    Ok(SlowKnnOutput {
        output,
        selected,
        weights,
    })
}

/// Shannon entropy (nats) of each row; `0 log 0 = 0`.
pub fn row_entropy(a: &Matrix) -> Vec<f64> {
    (0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum()
        })
        .collect()
}
