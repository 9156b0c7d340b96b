//! Invariant suite: kernel equivalences, mask structure, gradients, metric
//! oracles, temperature and model-level checks, each reported PASS/FAIL.

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_backward, dense_attention, knn_attention_fast, knn_attention_slow, lemma1_grad_wq_entry,
    lemma1_grad_wk_entry, masked_attention, row_entropy, row_topk_mask, scaled_scores, selection_margin,
    ProjectionWeights, SelectionMetric,
};
use crate::diagnostics::{attn_std, branch_ratio, cos_sim, nonlocality, GridShape};
use crate::numerics::{finite_diff_grad, relative_error, softmax_rows};
use crate::vit::{build_model, AttentionKind, ModelConfig, Pooling};
use crate::{Error, Matrix, Result, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random instances per check.
    pub instances: usize,
    pub max_n: usize,
    pub max_d: usize,
    /// Replaces every numeric tolerance when set.
    pub tolerance: Option<f64>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 50,
            max_n: 32,
            max_d: 16,
            tolerance: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (0 for purely structural checks).
    pub value: f64,
    pub tolerance: Option<f64>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn to_table(&self) -> String {
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for c in &self.checks {
            let tol = c.tolerance.map_or("-".to_string(), |t| format!("{t:e}"));
            s.push_str(&format!(
                "{} {:w$}  value={:.3e} tol={}  {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                tol,
                c.detail,
            ));
        }
        s
    }
}

struct Ctx<'a> {
    cfg: &'a VerifyConfig,
    rng: RngStream,
}

impl Ctx<'_> {
    fn tol(&self, default: f64) -> f64 {
        self.cfg.tolerance.unwrap_or(default)
    }

    fn dims(&mut self) -> (usize, usize) {
        let n = 2 + self.rng.below(self.cfg.max_n.max(2) - 1);
        let d = 1 + self.rng.below(self.cfg.max_d.max(1));
        (n, d)
    }

    fn qkv(&mut self, n: usize, d: usize) -> (Matrix, Matrix, Matrix) {
        (
            self.rng.normal_matrix(n, d, 1.0),
            self.rng.normal_matrix(n, d, 1.0),
            self.rng.normal_matrix(n, d, 1.0),
        )
    }

    /// Draws until the top-`k` selection is separated by a clear margin.
    fn tie_free(&mut self, n: usize, d: usize, k: usize) -> Result<(Matrix, Matrix, Matrix)> {
        for _ in 0..1000 {
            let (q, kk, v) = self.qkv(n, d);
            if selection_margin(&scaled_scores(&q, &kk, 1.0)?, k)? > 1e-6 {
                return Ok((q, kk, v));
            }
        }
        Err(Error::config("no tie-free instance in 1000 draws"))
    }
}

fn numeric(name: &str, value: f64, tol: f64, detail: String) -> Check {
    Check {
        name: name.into(),
        passed: value <= tol,
        value,
        tolerance: Some(tol),
        detail,
    }
}

fn structural(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        value: 0.0,
        tolerance: None,
        detail,
    }
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn check_dense_reduction(c: &mut Ctx) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..c.cfg.instances {
        let (n, d) = c.dims();
        let (q, k, v) = c.qkv(n, d);
        let fast = knn_attention_fast(&q, &k, &v, n, 1.0)?;
        let dense = dense_attention(&q, &k, &v, 1.0)?;
        worst = worst.max(max_abs_diff(&fast.output, &dense.output));
    }
    Ok(numeric("knn_full_k_equals_dense", worst, c.tol(1e-12), "max |fast(k=n) - dense|".into()))
}

fn check_slow_fast(c: &mut Ctx) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut same_sets = true;
    for _ in 0..c.cfg.instances {
        let (n, d) = c.dims();
        let k = 1 + c.rng.below(n);
        let (q, kk, v) = c.tie_free(n, d, k)?;
        let fast = knn_attention_fast(&q, &kk, &v, k, 1.0)?;
        let slow = knn_attention_slow(&q, &kk, &v, k, SelectionMetric::Dot, 1.0)?;
        for (i, sel) in slow.selected.iter().enumerate() {
            same_sets &= fast.mask.row_indices(i) == *sel;
        }
        worst = worst.max(max_abs_diff(&fast.output, &slow.output));
    }
    let mut ch = numeric("knn_slow_equals_fast", worst, c.tol(1e-13), "max |slow - fast|, same selections".into());
    if !same_sets {
        ch.passed = false;
        ch.detail = "selection sets differ".into();
    }
    Ok(ch)
}

fn check_mask_structure(c: &mut Ctx) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut counts_ok = true;
    for _ in 0..c.cfg.instances {
        let (n, d) = c.dims();
        let k = 1 + c.rng.below(n);
        let (q, kk, v) = c.tie_free(n, d, k)?;
        let out = knn_attention_fast(&q, &kk, &v, k, 1.0)?;
        for i in 0..n {
            let row = out.attention.row(i);
            counts_ok &= row.iter().filter(|&&a| a != 0.0).count() == k;
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let mut ch = numeric("mask_rows_k_nonzeros_sum_one", worst, c.tol(1e-12), "max |row sum - 1|, nonzero count == k".into());
    if !counts_ok {
        ch.passed = false;
        ch.detail = "a row has a nonzero count different from k".into();
    }
    Ok(ch)
}

fn check_attention_gradient(c: &mut Ctx) -> Result<Check> {
    let mut worst = 0.0f64;
    let h = 1e-5;
    for _ in 0..c.cfg.instances {
        let n = 2 + c.rng.below(7);
        let d = 1 + c.rng.below(5);
        let k = 1 + c.rng.below(n);
        let (q, kk, v) = c.tie_free(n, d, k)?;
        let mask = row_topk_mask(&scaled_scores(&q, &kk, 1.0)?, k)?;
        let up = c.rng.normal_matrix(n, d, 1.0);
        let g = attention_backward(&q, &kk, &v, &mask, &up, 1.0)?;
        let loss = |q: &Matrix, k: &Matrix, v: &Matrix| -> f64 {
            let o = masked_attention(q, k, v, &mask, 1.0).expect("forward").output;
            o.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum()
        };
        let nq = finite_diff_grad(|m| loss(m, &kk, &v), &q, h)?;
        let nk = finite_diff_grad(|m| loss(&q, m, &v), &kk, h)?;
        let nv = finite_diff_grad(|m| loss(&q, &kk, m), &v, h)?;
        for (a, b) in [(&g.d_q, &nq), (&g.d_k, &nk), (&g.d_v, &nv)] {
            worst = worst.max(relative_error(a.as_slice(), b.as_slice()));
        }
    }
    Ok(numeric("attention_backward_vs_fd", worst, c.tol(1e-5), "max relative error over dQ, dK, dV".into()))
}

fn check_lemma1_formula(c: &mut Ctx) -> Result<Check> {
    let mut worst = 0.0f64;
    let h = 1e-5;
    for _ in 0..c.cfg.instances.min(20) {
        let n = 3 + c.rng.below(6);
        let (dm, d) = (2 + c.rng.below(4), 1 + c.rng.below(4));
        let k = 1 + c.rng.below(n);
        let (x, w, mask) = loop {
            let x = c.rng.normal_matrix(n, dm, 1.0);
            let w = ProjectionWeights::random(dm, d, 1.0, &mut c.rng);
            let s = scaled_scores(&x.matmul(&w.w_q)?, &x.matmul(&w.w_k)?, 1.0)?;
            if selection_margin(&s, k)? > 1e-6 {
                break (x.clone(), w, row_topk_mask(&s, k)?);
            }
        };
        let l = c.rng.below(n);
        let out_row = |w: &ProjectionWeights| -> Vec<f64> {
            let q = x.matmul(&w.w_q).expect("q");
            let kk = x.matmul(&w.w_k).expect("k");
            let v = x.matmul(&w.w_v).expect("v");
            masked_attention(&q, &kk, &v, &mask, 1.0).expect("fwd").output.row(l).to_vec()
        };
        for which in 0..2 {
            let mut analytic = Vec::new();
            let mut fd = Vec::new();
            for i in 0..dm {
                for j in 0..d {
                    let g = if which == 0 {
                        lemma1_grad_wq_entry(&x, &w, l, (i, j), &mask, 1.0)?
                    } else {
                        lemma1_grad_wk_entry(&x, &w, l, (i, j), &mask, 1.0)?
                    };
                    analytic.extend_from_slice(g.as_slice());
                    let shifted = |delta: f64| {
                        let mut w2 = w.clone();
                        let m = if which == 0 { &mut w2.w_q } else { &mut w2.w_k };
                        m[(i, j)] += delta;
                        out_row(&w2)
                    };
                    let (p, m) = (shifted(h), shifted(-h));
                    fd.extend(p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)));
                }
            }
            worst = worst.max(relative_error(&analytic, &fd));
        }
    }
    Ok(numeric("covariance_gradient_formula_vs_fd", worst, c.tol(1e-5), "W_Q and W_K entries of dV_l".into()))
}

fn check_model_gradient(c: &mut Ctx) -> Result<Check> {
    let cfg = ModelConfig {
        grid_rows: 2,
        grid_cols: 2,
        patch_dim: 3,
        model_dim: 4,
        depth: 2,
        heads: 2,
        head_dim: 2,
        mlp_hidden: 5,
        kind: AttentionKind::Knn,
        k: Some(2),
        pooling: Pooling::Gap,
        classes: 3,
        temperature: 1.0,
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..c.cfg.instances.min(10) {
        let mut m = build_model(&cfg, &mut c.rng)?;
        m.params.visit_mut(|_, t| t.as_mut_slice().iter_mut().for_each(|v| *v += 0.5 * c.rng.normal()));
        let x = c.rng.normal_matrix(4, 3, 1.0);
        let label = c.rng.below(3);
        let (_, grad, pass) = m.loss_and_grad(&x, label)?;
        let masks = pass.masks();
        let base = m.params.flatten();
        let mut probe = m.clone();
        let mut fd = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut f = |delta: f64| -> Result<f64> {
                let mut w = base.clone();
                w[i] += delta;
                probe.params.assign_flat(&w);
                let logits = probe.forward_with_masks(&x, &masks)?.logits;
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
                Ok(lse - logits[label])
            };
            fd.push((f(h)? - f(-h)?) / (2.0 * h));
        }
        worst = worst.max(relative_error(grad.flatten().as_slice(), &fd));
    }
    Ok(numeric("model_backward_vs_fd", worst, c.tol(1e-5), "two-layer k-NN model, all parameters".into()))
}

fn random_attention(rng: &mut RngStream, n: usize) -> Result<Matrix> {
    let k = 1 + rng.below(n);
    let s = rng.normal_matrix(n, n, 2.0);
    let mask = row_topk_mask(&s, k)?;
    softmax_rows(&mask.apply(&s)?)
}

fn check_metric_oracles(c: &mut Ctx) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..c.cfg.instances.min(20) {
        let grid = GridShape::new(1 + c.rng.below(4), 1 + c.rng.below(4));
        let cls = c.rng.below(2) == 1;
        let n = grid.len() + usize::from(cls);
        if n < 2 {
            continue;
        }
        let d = 1 + c.rng.below(6);
        let t = c.rng.normal_matrix(n, d, 1.0);
        let heads: Vec<Matrix> = (0..1 + c.rng.below(3))
            .map(|_| random_attention(&mut c.rng, n))
            .collect::<Result<_>>()?;
        let branch = c.rng.normal_matrix(n, d, 0.3);

        let mut cs = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                    for p in 0..d {
                        ab += t[(i, p)] * t[(j, p)];
                        aa += t[(i, p)] * t[(i, p)];
                        bb += t[(j, p)] * t[(j, p)];
                    }
                    cs += ab / (aa.sqrt() * bb.sqrt());
                }
            }
        }
        cs /= (n * (n - 1)) as f64;
        worst = worst.max((cs - cos_sim(&t)?).abs());

        let mut sd = 0.0;
        for a in &heads {
            let mut per_row = 0.0;
            for i in 0..n {
                let mu = (0..n).map(|j| a[(i, j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (a[(i, j)] - mu).powi(2)).sum::<f64>() / n as f64;
                per_row += var.sqrt();
            }
            sd += per_row / n as f64;
        }
        sd /= heads.len() as f64;
        worst = worst.max((sd - attn_std(&heads)).abs());

        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for p in 0..d {
                num += branch[(i, p)].powi(2);
                den += t[(i, p)].powi(2);
            }
        }
        worst = worst.max(((num / den).sqrt() - branch_ratio(&branch, &t)?).abs());

        let off = usize::from(cls);
        let mut nl = 0.0;
        for a in &heads {
            let mut acc = 0.0;
            let mut cnt = 0;
            for qi in 0..grid.len() {
                let mass: f64 = (0..grid.len()).map(|kj| a[(qi + off, kj + off)]).sum();
                if mass <= 0.0 {
                    continue;
                }
                let (qr, qc) = ((qi / grid.cols) as f64, (qi % grid.cols) as f64);
                let mut s = 0.0;
                for kj in 0..grid.len() {
                    let (kr, kc) = ((kj / grid.cols) as f64, (kj % grid.cols) as f64);
                    s += a[(qi + off, kj + off)] * ((qr - kr).powi(2) + (qc - kc).powi(2)).sqrt();
                }
                acc += s / mass;
                cnt += 1;
            }
            nl += if cnt == 0 { 0.0 } else { acc / cnt as f64 };
        }
        nl /= heads.len() as f64;
        worst = worst.max((nl - nonlocality(&heads, grid, cls)?.mean).abs());
    }
    Ok(numeric("metric_oracles", worst, c.tol(1e-12), "cos_sim, attn_std, branch_ratio, nonlocality vs double loops".into()))
}

fn check_identity_nonlocality() -> Result<Check> {
    let grid = GridShape::new(3, 4);
    let v = nonlocality(&[Matrix::identity(12)], grid, false)?.mean;
    Ok(structural("identity_nonlocality_is_zero", v == 0.0, format!("value {v}")))
}

fn check_temperature(c: &mut Ctx) -> Result<Check> {
    let mut identical = true;
    let mut monotone = true;
    for _ in 0..c.cfg.instances {
        let (n, d) = c.dims();
        let (q, k, v) = c.qkv(n, d);
        let base = softmax_rows(&q.matmul_nt(&k)?.scale(1.0 / (d as f64).sqrt()))?;
        identical &= dense_attention(&q, &k, &v, 1.0)?.attention == base;
        let mut prev = vec![f64::NEG_INFINITY; n];
        for t in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let e = row_entropy(&dense_attention(&q, &k, &v, t)?.attention);
            monotone &= e.iter().zip(&prev).all(|(a, b)| *a >= *b - 1e-12);
            prev = e;
        }
    }
    Ok(structural(
        "temperature_one_identity_and_entropy_monotone",
        identical && monotone,
        format!("t=1 bit-identical: {identical}, entropy non-decreasing: {monotone}"),
    ))
}

fn check_model_reduction(c: &mut Ctx) -> Result<Check> {
    let dense_cfg = ModelConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..c.cfg.instances.min(10) {
        let dense = build_model(&dense_cfg, &mut c.rng)?;
        let mut knn = dense.clone();
        knn.config = dense_cfg.with_kind(AttentionKind::Knn, Some(dense_cfg.n_tokens()));
        let x = c.rng.normal_matrix(dense_cfg.n_patches(), dense_cfg.patch_dim, 1.0);
        let a = dense.forward(&x)?.logits;
        let b = knn.forward(&x)?.logits;
        worst = worst.max(a.iter().zip(&b).fold(0.0, |m, (x, y)| m.max((x - y).abs())));
    }
    Ok(numeric("model_knn_full_k_equals_dense", worst, c.tol(1e-12), "max |logit difference|".into()))
}

/// Runs every check. Each check draws from its own stream, so adding or
/// removing one does not change the others.
pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    if cfg.instances == 0 || cfg.max_n < 2 || cfg.max_d == 0 {
        return Err(Error::config("instances, max_n >= 2 and max_d must be positive"));
    }
    if let Some(t) = cfg.tolerance {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::config("tolerance must be finite and >= 0"));
        }
    }
    type CheckFn = fn(&mut Ctx) -> Result<Check>;
    let suite: [(u64, CheckFn); 9] = [
        (1, check_dense_reduction),
        (2, check_slow_fast),
        (3, check_mask_structure),
        (4, check_attention_gradient),
        (5, check_lemma1_formula),
        (6, check_model_gradient),
        (7, check_metric_oracles),
        (8, check_temperature),
        (9, check_model_reduction),
    ];
    let root = RngStream::new(cfg.seed);
    let mut checks = Vec::with_capacity(suite.len() + 1);
    for (tag, f) in suite {
        let mut ctx = Ctx { cfg, rng: root.fork(tag) };
        checks.push(f(&mut ctx)?);
    }
    checks.push(check_identity_nonlocality()?);
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyConfig {
        VerifyConfig {
            instances: 5,
            max_n: 10,
            max_d: 4,
            ..Default::default()
        }
    }

    #[test]
    fn default_suite_passes() {
        let r = run_verify(&quick()).unwrap();
        assert!(r.all_passed(), "{}", r.to_table());
        assert_eq!(r.checks.len(), 10);
    }

    #[test]
    fn zero_tolerance_fails_gradient_checks() {
        let r = run_verify(&VerifyConfig { tolerance: Some(0.0), ..quick() }).unwrap();
        let failing = r.failing();
        assert!(failing.contains(&"attention_backward_vs_fd"));
        assert!(failing.contains(&"model_backward_vs_fd"));
    }

    #[test]
    fn bad_tolerance_is_invalid() {
        assert!(run_verify(&VerifyConfig { tolerance: Some(-1.0), ..quick() }).is_err());
    }
}
