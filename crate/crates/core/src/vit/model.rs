use super::{AttentionKind, BlockParams, ModelConfig, Params, Pooling};
use crate::attention::{
    attention_backward_from_weights, dense_attention, knn_attention_fast, masked_attention, score_scale,
    TopKMask,
};
use crate::{Error, Matrix, Result, RngStream};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

/// Validates `cfg` and draws fresh parameters from `rng`.
pub fn build_model(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Model> {
    cfg.validate()?;
    Ok(Model {
        config: cfg.clone(),
        params: Params::init(cfg, rng),
    })
}

#[derive(Clone, Debug)]
struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Matrix, g: &Matrix, b: &Matrix) -> (Matrix, LnCache) {
    let (n, d) = x.shape();
    let mut xhat = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(s);
        for j in 0..d {
            let h = (row[j] - mu) * s;
            xhat.row_mut(i)[j] = h;
            y.row_mut(i)[j] = h * g.as_slice()[j] + b.as_slice()[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `(dx, dg, db)`.
fn layer_norm_backward(dy: &Matrix, c: &LnCache, g: &Matrix) -> (Matrix, Matrix, Matrix) {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dg = Matrix::zeros(1, d);
    let db = dy.column_sums();
    for i in 0..n {
        let xh = c.xhat.row(i);
        let dyr = dy.row(i);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            dg.as_mut_slice()[j] += dyr[j] * xh[j];
            let dxh = dyr[j] * g.as_slice()[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for j in 0..d {
            let dxh = dyr[j] * g.as_slice()[j];
            dx.row_mut(i)[j] = c.inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    (dx, dg, db)
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn add_row(m: &Matrix, row: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(row.as_slice()) {
            *o += b;
        }
    }
    out
}

#[derive(Clone, Debug)]
struct HeadCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attention: Matrix,
    mask: TopKMask,
}

#[derive(Clone, Debug)]
struct BlockCache {
    t_in: Matrix,
    ln1: LnCache,
    h: Matrix,
    heads: Vec<HeadCache>,
    concat: Matrix,
    attn_branch: Matrix,
    t_mid: Matrix,
    ln2: LnCache,
    h2: Matrix,
    u: Matrix,
    act: Matrix,
    ffn_branch: Matrix,
}

/// Everything the backward pass and the trace recorder need from one
/// forward pass over a single image.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    x: Matrix,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    normed: Matrix,
    pub logits: Vec<f64>,
}

impl ForwardPass {
    /// Selection masks per layer and head (full masks for dense layers).
    pub fn masks(&self) -> Vec<Vec<TopKMask>> {
        self.blocks
            .iter()
            .map(|b| b.heads.iter().map(|h| h.mask.clone()).collect())
            .collect()
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }

    /// Per-layer tokens, attention maps and residual branches.
    pub fn layers(&self) -> Vec<crate::diagnostics::LayerTrace> {
        self.blocks
            .iter()
            .map(|b| crate::diagnostics::LayerTrace {
                tokens_in: b.t_in.clone(),
                attention: b.heads.iter().map(|h| h.attention.clone()).collect(),
                attn_branch: b.attn_branch.clone(),
                ffn_input: b.t_mid.clone(),
                ffn_branch: b.ffn_branch.clone(),
            })
            .collect()
    }
}

/// First index of the largest entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `(loss, dlogits)` for softmax cross-entropy against `label`.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let lse = m + z.ln();
    let mut d: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    d[label] -= 1.0;
    (lse - logits[label], d)
}

impl Model {
    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        let want = (self.config.n_patches(), self.config.patch_dim);
        if x.shape() != want {
            return Err(Error::Shape {
                op: "model input",
                left: want,
                right: x.shape(),
            });
        }
        Ok(())
    }

    fn embed(&self, x: &Matrix) -> Result<Matrix> {
        let p = &self.params;
        let patches = add_row(&x.matmul(&p.embed_w)?, &p.embed_b);
        let tokens = match &p.cls {
            Some(c) => Matrix::vstack(&[c.clone(), patches])?,
            None => patches,
        };
        tokens.add(&p.pos)
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardPass> {
        self.forward_impl(x, None)
    }

    /// Forward pass with every selection mask held fixed. Away from ties
    /// this is the same function as [`Model::forward`] in a neighbourhood
    /// of the current parameters.
    pub fn forward_with_masks(&self, x: &Matrix, masks: &[Vec<TopKMask>]) -> Result<ForwardPass> {
        if masks.len() != self.config.depth || masks.iter().any(|m| m.len() != self.config.heads) {
            return Err(Error::config("mask list does not match depth x heads"));
        }
        self.forward_impl(x, Some(masks))
    }

    fn forward_impl(&self, x: &Matrix, masks: Option<&[Vec<TopKMask>]>) -> Result<ForwardPass> {
        self.check_input(x)?;
        let cfg = &self.config;
        let mut t = self.embed(x)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for (l, bp) in self.params.blocks.iter().enumerate() {
            let cache = self.block_forward(bp, &t, masks.map(|m| &m[l][..]))?;
            t = cache.t_mid.add(&cache.ffn_branch)?;
            blocks.push(cache);
        }
        let (normed, lnf) = layer_norm(&t, &self.params.norm_g, &self.params.norm_b);
        let pooled = match cfg.pooling {
            Pooling::Gap => normed.column_means(),
            Pooling::Cls => normed.row_matrix(0),
        };
        let logits = add_row(&pooled.matmul(&self.params.head_w)?, &self.params.head_b).into_vec();
        Ok(ForwardPass {
            x: x.clone(),
            blocks,
            lnf,
            normed,
            logits,
        })
    }

    fn block_forward(&self, bp: &BlockParams, t: &Matrix, masks: Option<&[TopKMask]>) -> Result<BlockCache> {
        let cfg = &self.config;
        let n = t.rows();
        let d = cfg.head_dim;
        let (h, ln1) = layer_norm(t, &bp.ln1_g, &bp.ln1_b);
        let q_all = h.matmul(&bp.w_q)?;
        let k_all = h.matmul(&bp.w_k)?;
        let v_all = h.matmul(&bp.w_v)?;
        let mut concat = Matrix::zeros(n, cfg.model_dim);
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let q = q_all.column_block(hd * d, d);
            let k = k_all.column_block(hd * d, d);
            let v = v_all.column_block(hd * d, d);
            let (output, attention, mask) = match (masks, cfg.kind) {
                (Some(m), _) => {
                    let o = masked_attention(&q, &k, &v, &m[hd], cfg.temperature)?;
                    (o.output, o.attention, m[hd].clone())
                }
                (None, AttentionKind::Dense) => {
                    let o = dense_attention(&q, &k, &v, cfg.temperature)?;
                    (o.output, o.attention, TopKMask::full(n, n))
                }
                (None, AttentionKind::Knn) => {
                    let o = knn_attention_fast(&q, &k, &v, cfg.effective_k(), cfg.temperature)?;
                    (o.output, o.attention, o.mask)
                }
            };
            concat.set_column_block(hd * d, &output);
            heads.push(HeadCache { q, k, v, attention, mask });
        }
        let attn_branch = add_row(&concat.matmul(&bp.w_o)?, &bp.b_o);
        let t_mid = t.add(&attn_branch)?;
        let (h2, ln2) = layer_norm(&t_mid, &bp.ln2_g, &bp.ln2_b);
        let u = add_row(&h2.matmul(&bp.w_1)?, &bp.b_1);
        let act = u.map(gelu);
        let ffn_branch = add_row(&act.matmul(&bp.w_2)?, &bp.b_2);
        Ok(BlockCache {
            t_in: t.clone(),
            ln1,
            h,
            heads,
            concat,
            attn_branch,
            t_mid,
            ln2,
            h2,
            u,
            act,
            ffn_branch,
        })
    }

    /// Cross-entropy of one image.
    pub fn loss(&self, x: &Matrix, label: usize) -> Result<f64> {
        self.check_label(label)?;
        Ok(cross_entropy(&self.forward(x)?.logits, label).0)
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.config.classes {
            return Err(Error::IndexOutOfRange {
                index: label,
                len: self.config.classes,
            });
        }
        Ok(())
    }

    /// Loss, parameter gradient and forward pass for one image.
    pub fn loss_and_grad(&self, x: &Matrix, label: usize) -> Result<(f64, Params, ForwardPass)> {
        self.check_label(label)?;
        let pass = self.forward(x)?;
        let (loss, dlogits) = cross_entropy(&pass.logits, label);
        let grad = self.backward(&pass, &dlogits)?;
        Ok((loss, grad, pass))
    }

    /// Gradient of `dlogits · logits` with every selection mask frozen.
    pub fn backward(&self, pass: &ForwardPass, dlogits: &[f64]) -> Result<Params> {
        let cfg = &self.config;
        let p = &self.params;
        let mut g = p.zeros_like();
        let dl = Matrix::from_vec(1, cfg.classes, dlogits.to_vec())?;
        let pooled = match cfg.pooling {
            Pooling::Gap => pass.normed.column_means(),
            Pooling::Cls => pass.normed.row_matrix(0),
        };
        g.head_w = pooled.matmul_tn(&dl)?;
        g.head_b = dl.clone();
        let dpooled = dl.matmul_nt(&p.head_w)?;
        let n = cfg.n_tokens();
        let mut dnormed = Matrix::zeros(n, cfg.model_dim);
        match cfg.pooling {
            Pooling::Gap => {
                let inv = 1.0 / n as f64;
                for i in 0..n {
                    for (o, v) in dnormed.row_mut(i).iter_mut().zip(dpooled.as_slice()) {
                        *o = v * inv;
                    }
                }
            }
            Pooling::Cls => dnormed.row_mut(0).copy_from_slice(dpooled.as_slice()),
        }
        let (mut dt, dg, db) = layer_norm_backward(&dnormed, &pass.lnf, &p.norm_g);
        g.norm_g = dg;
        g.norm_b = db;
        for l in (0..cfg.depth).rev() {
            dt = self.block_backward(&p.blocks[l], &pass.blocks[l], &dt, &mut g.blocks[l])?;
        }
        g.pos = dt.clone();
        let patch_rows: Vec<usize> = (n - cfg.n_patches()..n).collect();
        if let Some(c) = &mut g.cls {
            c.as_mut_slice().copy_from_slice(dt.row(0));
        }
        let dpatch = dt.select_rows(&patch_rows);
        g.embed_w = pass.x.matmul_tn(&dpatch)?;
        g.embed_b = dpatch.column_sums();
        Ok(g)
    }

    fn block_backward(&self, bp: &BlockParams, c: &BlockCache, dt_out: &Matrix, g: &mut BlockParams) -> Result<Matrix> {
        let cfg = &self.config;
        let d = cfg.head_dim;
        // MLP branch.
        let df = dt_out;
        g.w_2 = c.act.matmul_tn(df)?;
        g.b_2 = df.column_sums();
        let dact = df.matmul_nt(&bp.w_2)?;
        let du = Matrix::from_fn(c.u.rows(), c.u.cols(), |i, j| dact[(i, j)] * gelu_grad(c.u[(i, j)]));
        g.w_1 = c.h2.matmul_tn(&du)?;
        g.b_1 = du.column_sums();
        let dh2 = du.matmul_nt(&bp.w_1)?;
        let (dx2, dg2, db2) = layer_norm_backward(&dh2, &c.ln2, &bp.ln2_g);
        g.ln2_g = dg2;
        g.ln2_b = db2;
        let dt_mid = dt_out.add(&dx2)?;
        // Attention branch.
        g.w_o = c.concat.matmul_tn(&dt_mid)?;
        g.b_o = dt_mid.column_sums();
        let dconcat = dt_mid.matmul_nt(&bp.w_o)?;
        let n = c.t_in.rows();
        let mut dq = Matrix::zeros(n, cfg.model_dim);
        let mut dk = Matrix::zeros(n, cfg.model_dim);
        let mut dv = Matrix::zeros(n, cfg.model_dim);
        let scale = score_scale(d, cfg.temperature);
        for (hd, hc) in c.heads.iter().enumerate() {
            let up = dconcat.column_block(hd * d, d);
            let gr = attention_backward_from_weights(&hc.q, &hc.k, &hc.v, &hc.attention, &up, scale)?;
            dq.set_column_block(hd * d, &gr.d_q);
            dk.set_column_block(hd * d, &gr.d_k);
            dv.set_column_block(hd * d, &gr.d_v);
        }
        g.w_q = c.h.matmul_tn(&dq)?;
        g.w_k = c.h.matmul_tn(&dk)?;
        g.w_v = c.h.matmul_tn(&dv)?;
        let mut dh = dq.matmul_nt(&bp.w_q)?;
        dh.add_assign(&dk.matmul_nt(&bp.w_k)?)?;
        dh.add_assign(&dv.matmul_nt(&bp.w_v)?)?;
        let (dx1, dg1, db1) = layer_norm_backward(&dh, &c.ln1, &bp.ln1_g);
        g.ln1_g = dg1;
        g.ln1_b = db1;
        dt_mid.add(&dx1)
    }
}
