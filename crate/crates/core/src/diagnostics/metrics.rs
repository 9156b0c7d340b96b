use super::GridShape;
use crate::numerics::{dot, mean, population_std};
use crate::{Error, Matrix, Result};

/// Mean cosine similarity over ordered token pairs `i ≠ j`.
pub fn cos_sim(tokens: &Matrix) -> Result<f64> {
    let n = tokens.rows();
    if n < 2 {
        return Err(Error::config("cos_sim needs at least two tokens"));
    }
    let norms: Vec<f64> = (0..n).map(|i| tokens.row_norm(i)).collect();
    if let Some(index) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::ZeroNorm { index });
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let c = dot(tokens.row(i), tokens.row(j)) / (norms[i] * norms[j]);
            total += 2.0 * c.clamp(-1.0, 1.0);
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Population std of each attention row, averaged over rows and then heads.
pub fn attn_std(heads: &[Matrix]) -> f64 {
    let per_head: Vec<f64> = heads
        .iter()
        .map(|a| {
            let rows: Vec<f64> = (0..a.rows()).map(|i| population_std(a.row(i))).collect();
            mean(&rows)
        })
        .collect();
    mean(&per_head)
}

/// `‖branch_out‖_F / ‖block_in‖_F`.
pub fn branch_ratio(branch_out: &Matrix, block_in: &Matrix) -> Result<f64> {
    if branch_out.shape() != block_in.shape() {
        return Err(Error::Shape {
            op: "branch_ratio",
            left: branch_out.shape(),
            right: block_in.shape(),
        });
    }
    let denom = block_in.frobenius_norm();
    if denom == 0.0 {
        return Err(Error::config("branch_ratio: block input has zero norm"));
    }
    Ok(branch_out.frobenius_norm() / denom)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nonlocality {
    pub per_head: Vec<f64>,
    /// Mean of `per_head`.
    pub mean: f64,
}

/// Attention-weighted grid distance between each query patch and its keys,
/// averaged over query patches, then over heads.
///
/// A CLS token (index 0 when `cls_present`) is dropped from both sides and
/// each query's remaining spatial mass is renormalised to one. Queries
/// with no spatial mass at all are left out of the average.
pub fn nonlocality(heads: &[Matrix], grid: GridShape, cls_present: bool) -> Result<Nonlocality> {
    let offset = usize::from(cls_present);
    let n = grid.len() + offset;
    let mut dist = vec![0.0; grid.len() * grid.len()];
    for a in 0..grid.len() {
        for b in 0..grid.len() {
            dist[a * grid.len() + b] = grid.distance(a, b);
        }
    }
    let mut per_head = Vec::with_capacity(heads.len());
    for a in heads {
        if a.shape() != (n, n) {
            return Err(Error::Shape {
                op: "nonlocality",
                left: (n, n),
                right: a.shape(),
            });
        }
        let mut acc = 0.0;
        let mut counted = 0usize;
        for qi in 0..grid.len() {
            let row = &a.row(qi + offset)[offset..];
            let mass: f64 = row.iter().sum();
            if mass <= 0.0 {
                continue;
            }
            let d = &dist[qi * grid.len()..(qi + 1) * grid.len()];
            acc += dot(row, d) / mass;
            counted += 1;
        }
        per_head.push(if counted == 0 { 0.0 } else { acc / counted as f64 });
    }
    let m = mean(&per_head);
    Ok(Nonlocality { per_head, mean: m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::RngStream;

    #[test]
    fn identical_tokens_have_unit_similarity() {
        let t = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        assert!((cos_sim(&t).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_tokens_have_zero_similarity() {
        assert_eq!(cos_sim(&Matrix::identity(2)).unwrap(), 0.0);
    }

    #[test]
    fn zero_token_is_named() {
        let t = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        assert!(matches!(cos_sim(&t), Err(Error::ZeroNorm { index: 1 })));
    }

    #[test]
    fn cos_sim_ignores_positive_rescaling() {
        let mut rng = RngStream::new(3);
        let t = rng.normal_matrix(5, 4, 1.0);
        let mut s = t.clone();
        s.row_mut(2).iter_mut().for_each(|x| *x *= 7.5);
        assert!((cos_sim(&t).unwrap() - cos_sim(&s).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn attn_std_cases() {
        assert_eq!(attn_std(&[Matrix::filled(3, 3, 1.0 / 3.0)]), 0.0);
        let one_hot = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!((attn_std(&[one_hot]) - 0.5).abs() < 1e-16);
    }

    #[test]
    fn branch_ratio_cases() {
        let t = RngStream::new(4).normal_matrix(3, 3, 1.0);
        assert!((branch_ratio(&t, &t).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(branch_ratio(&Matrix::zeros(3, 3), &t).unwrap(), 0.0);
        assert!((branch_ratio(&t.scale(2.0), &t).unwrap() - 2.0).abs() < 1e-15);
        assert!(branch_ratio(&t, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn identity_attention_is_local() {
        let g = GridShape::new(3, 3);
        let r = nonlocality(&[Matrix::identity(9)], g, false).unwrap();
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn uniform_on_two_by_two() {
        let g = GridShape::new(2, 2);
        let r = nonlocality(&[Matrix::filled(4, 4, 0.25)], g, false).unwrap();
        let want = (0.0 + 1.0 + 1.0 + 2f64.sqrt()) / 4.0;
        assert!((r.mean - want).abs() < 1e-15);
        assert!((want - 0.8536).abs() < 1e-4);
    }

    #[test]
    fn uniform_on_a_line_matches_mean_index_gap() {
        let n = 7;
        let g = GridShape::new(1, n);
        let r = nonlocality(&[Matrix::filled(n, n, 1.0 / n as f64)], g, false).unwrap();
        let mut gap = 0.0;
        for i in 0..n {
            for j in 0..n {
                gap += (i as f64 - j as f64).abs();
            }
        }
        gap /= (n * n) as f64;
        assert!((r.mean - gap).abs() < 1e-14);
    }

    #[test]
    fn cls_is_excluded_and_renormalised() {
        // CLS plus a 1x2 grid; spatial rows put half their mass on CLS.
        let a = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.5, 0.25, 0.25], [0.5, 0.0, 0.5]]);
        let r = nonlocality(&[a], GridShape::new(1, 2), true).unwrap();
        // query 0: (0.25*0 + 0.25*1)/0.5 = 0.5 ; query 1: 0
        assert!((r.mean - 0.25).abs() < 1e-15);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        assert!(nonlocality(&[Matrix::identity(5)], GridShape::new(2, 2), false).is_err());
    }
}
