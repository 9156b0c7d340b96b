use super::{masked_attention, score_scale, TopKMask};
use crate::{Error, Matrix, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub d_q: Matrix,
    pub d_k: Matrix,
    pub d_v: Matrix,
}

/// Reverse-mode derivatives of `softmax(mask(Q Kᵀ · s)) V` with the mask
/// held fixed. Unselected weights are exact zeros and receive no gradient.
pub fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &TopKMask,
    upstream: &Matrix,
    temperature: f64,
) -> Result<AttentionGrads> {
    let fwd = masked_attention(q, k, v, mask, temperature)?;
    attention_backward_from_weights(q, k, v, &fwd.attention, upstream, score_scale(q.cols(), temperature))
}

/// Same as [`attention_backward`] but reuses forward weights `attention`
/// and an explicit score scale.
pub fn attention_backward_from_weights(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    attention: &Matrix,
    upstream: &Matrix,
    scale: f64,
) -> Result<AttentionGrads> {
    if upstream.shape() != (q.rows(), v.cols()) {
        return Err(Error::Shape {
            op: "attention_backward upstream",
            left: (q.rows(), v.cols()),
            right: upstream.shape(),
        });
    }
    if attention.shape() != (q.rows(), k.rows()) {
        return Err(Error::Shape {
            op: "attention_backward weights",
            left: (q.rows(), k.rows()),
            right: attention.shape(),
        });
    }
    let d_v = attention.matmul_tn(upstream)?;
    let d_a = upstream.matmul_nt(v)?;
    let mut d_s = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let a = attention.row(i);
        let g = d_a.row(i);
        let mut inner = 0.0;
        for (x, y) in a.iter().zip(g) {
            inner += x * y;
        }
        for (o, (x, y)) in d_s.row_mut(i).iter_mut().zip(a.iter().zip(g)) {
            *o = x * (y - inner) * scale;
        }
    }
    let d_q = d_s.matmul(k)?;
    let d_k = d_s.matmul_tn(q)?;
    Ok(AttentionGrads { d_q, d_k, d_v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{dense_attention, row_topk_mask, scaled_scores};
    use crate::numerics::{finite_diff_grad, relative_error};
    use crate::RngStream;

    fn setup(seed: u64, n: usize, d: usize, k: usize) -> (Matrix, Matrix, Matrix, TopKMask, Matrix) {
        let mut rng = RngStream::new(seed);
        let q = rng.normal_matrix(n, d, 1.0);
        let kk = rng.normal_matrix(n, d, 1.0);
        let v = rng.normal_matrix(n, d, 1.0);
        let g = rng.normal_matrix(n, d, 1.0);
        let mask = row_topk_mask(&scaled_scores(&q, &kk, 1.0).unwrap(), k).unwrap();
        (q, kk, v, mask, g)
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let (q, k, v, mask, _) = setup(1, 5, 3, 2);
        let g = Matrix::zeros(5, 3);
        let grads = attention_backward(&q, &k, &v, &mask, &g, 1.0).unwrap();
        for m in [grads.d_q, grads.d_k, grads.d_v] {
            assert!(m.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn matches_finite_differences() {
        let (q, k, v, mask, g) = setup(2, 6, 3, 2);
        let t = 1.0;
        let loss = |q: &Matrix, k: &Matrix, v: &Matrix| {
            let o = masked_attention(q, k, v, &mask, t).unwrap().output;
            o.hadamard(&g).unwrap().sum()
        };
        let grads = attention_backward(&q, &k, &v, &mask, &g, t).unwrap();
        let fq = finite_diff_grad(|x| loss(x, &k, &v), &q, 1e-5).unwrap();
        let fk = finite_diff_grad(|x| loss(&q, x, &v), &k, 1e-5).unwrap();
        let fv = finite_diff_grad(|x| loss(&q, &k, x), &v, 1e-5).unwrap();
        assert!(relative_error(grads.d_q.as_slice(), fq.as_slice()) < 1e-6);
        assert!(relative_error(grads.d_k.as_slice(), fk.as_slice()) < 1e-6);
        assert!(relative_error(grads.d_v.as_slice(), fv.as_slice()) < 1e-6);
    }

    #[test]
    fn full_mask_equals_dense_backward() {
        let (q, k, v, _, g) = setup(3, 5, 4, 5);
        let full = TopKMask::full(5, 5);
        let a = attention_backward(&q, &k, &v, &full, &g, 1.0).unwrap();
        let dense = dense_attention(&q, &k, &v, 1.0).unwrap();
        let b = attention_backward_from_weights(&q, &k, &v, &dense.attention, &g, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn upstream_shape_is_checked() {
        let (q, k, v, mask, _) = setup(4, 4, 2, 2);
        let bad = Matrix::zeros(3, 2);
        assert!(attention_backward(&q, &k, &v, &mask, &bad, 1.0).is_err());
    }
}
