use knn_attn::attention::{
    attention_backward, dense_attention, knn_attention_fast, knn_attention_slow, row_entropy, row_topk_mask,
    weighted_covariance, SelectionMetric, TopKMask,
};
use knn_attn::diagnostics::{attn_std, cos_sim, nonlocality, GridShape};
use knn_attn::numerics::softmax_rows;
use knn_attn::vit::{build_model, AttentionKind, Checkpoint, ModelConfig, Pooling};
use knn_attn::{Exec, Matrix, RngStream};
use proptest::prelude::*;

fn gaussian(seed: u64, rows: usize, cols: usize) -> Matrix {
    RngStream::new(seed).normal_matrix(rows, cols, 1.0)
}

fn stochastic(seed: u64, n: usize) -> Matrix {
    softmax_rows(&gaussian(seed, n, n).scale(3.0)).unwrap()
}

prop_compose! {
    fn qkv()(n in 1usize..24, d in 1usize..10, seed in any::<u64>()) -> (Matrix, Matrix, Matrix) {
        let mut rng = RngStream::new(seed);
        (rng.normal_matrix(n, d, 1.0), rng.normal_matrix(n, d, 1.0), rng.normal_matrix(n, d, 1.0))
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn matmul_matches_triple_loop(r in 1usize..8, m in 1usize..8, c in 1usize..8, seed in any::<u64>()) {
        let a = gaussian(seed, r, m);
        let b = gaussian(seed ^ 1, m, c);
        let p = a.matmul(&b).unwrap();
        for i in 0..r {
            for j in 0..c {
                let mut s = 0.0;
                for t in 0..m {
                    s += a[(i, t)] * b[(t, j)];
                }
                prop_assert!((p[(i, j)] - s).abs() <= 1e-15 * (1.0 + s.abs()));
            }
        }
        prop_assert_eq!(a.matmul_nt(&b.transpose()).unwrap(), p);
    }

    #[test]
    fn softmax_rows_are_shift_invariant_distributions(n in 1usize..12, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let s = gaussian(seed, 3, n).scale(4.0);
        let a = softmax_rows(&s).unwrap();
        let b = softmax_rows(&s.map(|x| x + shift)).unwrap();
        for i in 0..3 {
            let sum: f64 = a.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(a.row(i).iter().all(|&p| p >= 0.0));
        }
        prop_assert!(a.sub(&b).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn topk_mask_matches_stable_sort(n in 1usize..20, seed in any::<u64>(), ties in any::<bool>()) {
        let mut rng = RngStream::new(seed);
        let s = Matrix::from_fn(4, n, |_, _| if ties { rng.below(3) as f64 } else { rng.normal() });
        let k = 1 + rng.below(n);
        let mask = row_topk_mask(&s, k).unwrap();
        for i in 0..4 {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| s[(i, b)].partial_cmp(&s[(i, a)]).unwrap());
            let mut want = idx[..k].to_vec();
            want.sort_unstable();
            prop_assert_eq!(mask.row_indices(i), want);
        }
    }

    #[test]
    fn full_k_equals_dense((q, k, v) in qkv(), t in 0.25f64..4.0) {
        let n = q.rows();
        let fast = knn_attention_fast(&q, &k, &v, n, t).unwrap();
        let dense = dense_attention(&q, &k, &v, t).unwrap();
        prop_assert!(fast.output.sub(&dense.output).unwrap().max_abs() <= 1e-12);
        for metric in [SelectionMetric::Dot, SelectionMetric::Euclidean] {
            let slow = knn_attention_slow(&q, &k, &v, n, metric, t).unwrap();
            prop_assert!(slow.output.sub(&dense.output).unwrap().max_abs() <= 1e-12);
        }
    }

    #[test]
    fn k_one_returns_best_value_row((q, k, v) in qkv()) {
        let out = knn_attention_fast(&q, &k, &v, 1, 1.0).unwrap();
        let scores = q.matmul_nt(&k).unwrap();
        for i in 0..q.rows() {
            let best = (0..k.rows()).fold(0, |b, j| if scores[(i, j)] > scores[(i, b)] { j } else { b });
            prop_assert_eq!(out.output.row(i), v.row(best));
        }
    }

    #[test]
    fn unit_norm_keys_select_identically_under_both_metrics((q, k, v) in qkv(), frac in 0.0f64..1.0) {
        let n = q.rows();
        let top = 1 + ((n - 1) as f64 * frac) as usize;
        let k = Matrix::from_fn(n, k.cols(), |i, j| k[(i, j)] / k.row_norm(i));
        let dot = knn_attention_slow(&q, &k, &v, top, SelectionMetric::Dot, 1.0).unwrap();
        let euc = knn_attention_slow(&q, &k, &v, top, SelectionMetric::Euclidean, 1.0).unwrap();
        let scores = q.matmul_nt(&k).unwrap();
        let margin_ok = (0..n).all(|i| {
            let mut r = scores.row(i).to_vec();
            r.sort_by(|a, b| b.partial_cmp(a).unwrap());
            top == n || r[top - 1] - r[top] > 1e-9
        });
        prop_assume!(margin_ok);
        prop_assert_eq!(dot.selected, euc.selected);
    }

    #[test]
    fn backward_is_linear_in_upstream((q, k, v) in qkv(), seed in any::<u64>(), c in -3.0f64..3.0) {
        let n = q.rows();
        let mask = knn_attention_fast(&q, &k, &v, 1 + n / 2, 1.0).unwrap().mask;
        let up = gaussian(seed, n, v.cols());
        let g1 = attention_backward(&q, &k, &v, &mask, &up, 1.0).unwrap();
        let g2 = attention_backward(&q, &k, &v, &mask, &up.scale(c), 1.0).unwrap();
        for (a, b) in [(&g1.d_q, &g2.d_q), (&g1.d_k, &g2.d_k), (&g1.d_v, &g2.d_v)] {
            prop_assert!(a.scale(c).sub(b).unwrap().max_abs() <= 1e-10 * (1.0 + a.max_abs()));
        }
        let zero = attention_backward(&q, &k, &v, &mask, &Matrix::zeros(n, v.cols()), 1.0).unwrap();
        prop_assert_eq!(zero.d_q.max_abs() + zero.d_k.max_abs() + zero.d_v.max_abs(), 0.0);
    }

    #[test]
    fn full_mask_backward_equals_dense_backward((q, k, v) in qkv(), seed in any::<u64>()) {
        let n = q.rows();
        let up = gaussian(seed, n, v.cols());
        let full = attention_backward(&q, &k, &v, &TopKMask::full(n, n), &up, 1.0).unwrap();
        let topn = knn_attention_fast(&q, &k, &v, n, 1.0).unwrap().mask;
        let viak = attention_backward(&q, &k, &v, &topn, &up, 1.0).unwrap();
        prop_assert_eq!(full.d_q, viak.d_q);
        prop_assert_eq!(full.d_v, viak.d_v);
    }

    #[test]
    fn weighted_covariance_is_symmetric_with_nonnegative_diagonal(n in 1usize..12, d in 1usize..6, seed in any::<u64>()) {
        let x = gaussian(seed, n, d);
        let w = softmax_rows(&gaussian(seed ^ 7, 1, n)).unwrap();
        let c = weighted_covariance(&x, w.row(0)).unwrap();
        for i in 0..d {
            prop_assert!(c[(i, i)] >= -1e-15);
            for j in 0..d {
                prop_assert!((c[(i, j)] - c[(j, i)]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn diagnostics_stay_in_range(rows in 1usize..5, cols in 1usize..5, cls in any::<bool>(), seed in any::<u64>()) {
        let grid = GridShape::new(rows, cols);
        let n = grid.len() + usize::from(cls);
        let tokens = gaussian(seed, n.max(2), 4);
        let c = cos_sim(&tokens).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        let heads = vec![stochastic(seed, n), stochastic(seed ^ 3, n)];
        prop_assert!(attn_std(&heads) >= 0.0);
        let nl = nonlocality(&heads, grid, cls).unwrap();
        for &h in &nl.per_head {
            prop_assert!((0.0..=grid.max_distance() + 1e-12).contains(&h));
        }
    }

    #[test]
    fn entropy_grows_with_temperature(n in 2usize..16, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let (q, k, v) = (rng.normal_matrix(n, 4, 1.0), rng.normal_matrix(n, 4, 1.0), rng.normal_matrix(n, 4, 1.0));
        let mut prev = vec![0.0; n];
        for t in [0.2, 0.5, 1.0, 2.0, 5.0] {
            let h = row_entropy(&dense_attention(&q, &k, &v, t).unwrap().attention);
            for (a, b) in h.iter().zip(&prev) {
                prop_assert!(a + 1e-12 >= *b);
            }
            prev = h;
        }
    }

    #[test]
    fn rng_streams_are_reproducible(seed in any::<u64>(), tag in any::<u64>()) {
        let a: Vec<u64> = { let mut r = RngStream::new(seed).fork(tag); (0..8).map(|_| r.next_u64()).collect() };
        let b: Vec<u64> = { let mut r = RngStream::new(seed).fork(tag); (0..8).map(|_| r.next_u64()).collect() };
        let c: Vec<u64> = { let mut r = RngStream::new(seed).fork(tag.wrapping_add(1)); (0..8).map(|_| r.next_u64()).collect() };
        prop_assert_eq!(&a, &b);
        prop_assert_ne!(a, c);
    }

    #[test]
    fn executors_agree(n in 0usize..200, seed in any::<u64>()) {
        let root = RngStream::new(seed);
        let f = |i: usize| root.fork(i as u64).normal();
        let seq = Exec::Sequential.map_indexed(n, f);
        let par = Exec::best_available().map_indexed(n, f);
        prop_assert_eq!(seq, par);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), knn in any::<bool>(), cls in any::<bool>(), epoch in 0usize..50) {
        let cfg = ModelConfig {
            grid_rows: 2,
            grid_cols: 2,
            patch_dim: 3,
            model_dim: 4,
            depth: 1,
            heads: 2,
            head_dim: 2,
            mlp_hidden: 5,
            kind: if knn { AttentionKind::Knn } else { AttentionKind::Dense },
            k: knn.then_some(2),
            pooling: if cls { Pooling::Cls } else { Pooling::Gap },
            classes: 3,
            temperature: 1.0,
        };
        let model = build_model(&cfg, &mut RngStream::new(seed)).unwrap();
        let ck = Checkpoint { model, train: None, epoch, adam: None };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, ck);
    }
}
