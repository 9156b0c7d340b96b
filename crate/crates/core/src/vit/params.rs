use super::ModelConfig;
use crate::{Matrix, RngStream};

/// Weights of one pre-norm block. Attention projections are stored as
/// `model_dim × model_dim` with head `h` in columns `h*d..(h+1)*d`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub w_1: Matrix,
    pub b_1: Matrix,
    pub w_2: Matrix,
    pub b_2: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub embed_w: Matrix,
    pub embed_b: Matrix,
    pub cls: Option<Matrix>,
    pub pos: Matrix,
    pub blocks: Vec<BlockParams>,
    pub norm_g: Matrix,
    pub norm_b: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

const INIT_STD: f64 = 0.02;

impl Params {
    /// Truncated-normal weights (std 0.02), zero biases, unit norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let dm = cfg.model_dim;
        let mut w = |r, c| rng.truncated_normal_matrix(r, c, INIT_STD);
        let embed_w = w(cfg.patch_dim, dm);
        let cls = (cfg.n_tokens() > cfg.n_patches()).then(|| w(1, dm));
        let pos = w(cfg.n_tokens(), dm);
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                ln1_g: Matrix::filled(1, dm, 1.0),
                ln1_b: Matrix::zeros(1, dm),
                w_q: w(dm, dm),
                w_k: w(dm, dm),
                w_v: w(dm, dm),
                w_o: w(dm, dm),
                b_o: Matrix::zeros(1, dm),
                ln2_g: Matrix::filled(1, dm, 1.0),
                ln2_b: Matrix::zeros(1, dm),
                w_1: w(dm, cfg.mlp_hidden),
                b_1: Matrix::zeros(1, cfg.mlp_hidden),
                w_2: w(cfg.mlp_hidden, dm),
                b_2: Matrix::zeros(1, dm),
            })
            .collect();
        let head_w = w(dm, cfg.classes);
        Self {
            embed_w,
            embed_b: Matrix::zeros(1, dm),
            cls,
            pos,
            blocks,
            norm_g: Matrix::filled(1, dm, 1.0),
            norm_b: Matrix::zeros(1, dm),
            head_w,
            head_b: Matrix::zeros(1, cfg.classes),
        }
    }

    /// Same structure, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(|_, m| m.as_mut_slice().fill(0.0));
        out
    }

    /// Visits every tensor in a fixed order with a stable name.
    pub fn visit(&self, mut f: impl FnMut(&str, &Matrix)) {
        f("embed.w", &self.embed_w);
        f("embed.b", &self.embed_b);
        if let Some(c) = &self.cls {
            f("cls", c);
        }
        f("pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, m) in block_tensors(b) {
                f(&format!("block{i}.{name}"), m);
            }
        }
        f("norm.g", &self.norm_g);
        f("norm.b", &self.norm_b);
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Matrix)) {
        f("embed.w", &mut self.embed_w);
        f("embed.b", &mut self.embed_b);
        if let Some(c) = &mut self.cls {
            f("cls", c);
        }
        f("pos", &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, m) in block_tensors_mut(b) {
                f(&format!("block{i}.{name}"), m);
            }
        }
        f("norm.g", &mut self.norm_g);
        f("norm.b", &mut self.norm_b);
        f("head.w", &mut self.head_w);
        f("head.b", &mut self.head_b);
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.visit(|_, m| n += m.as_slice().len());
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries concatenated in visit order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.visit(|_, m| out.extend_from_slice(m.as_slice()));
        out
    }

    /// Inverse of [`Params::flatten`]. Panics on a length mismatch.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len());
        let mut off = 0;
        self.visit_mut(|_, m| {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Params) {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut(|_, m| {
            for x in m.as_mut_slice() {
                *x += flat[off];
                off += 1;
            }
        });
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.visit_mut(|_, m| m.as_mut_slice().iter_mut().for_each(|x| *x *= s));
    }
}

fn block_tensors(b: &BlockParams) -> [(&'static str, &Matrix); 13] {
    [
        ("ln1.g", &b.ln1_g),
        ("ln1.b", &b.ln1_b),
        ("attn.w_q", &b.w_q),
        ("attn.w_k", &b.w_k),
        ("attn.w_v", &b.w_v),
        ("attn.w_o", &b.w_o),
        ("attn.b_o", &b.b_o),
        ("ln2.g", &b.ln2_g),
        ("ln2.b", &b.ln2_b),
        ("mlp.w_1", &b.w_1),
        ("mlp.b_1", &b.b_1),
        ("mlp.w_2", &b.w_2),
        ("mlp.b_2", &b.b_2),
    ]
}

fn block_tensors_mut(b: &mut BlockParams) -> [(&'static str, &mut Matrix); 13] {
    [
        ("ln1.g", &mut b.ln1_g),
        ("ln1.b", &mut b.ln1_b),
        ("attn.w_q", &mut b.w_q),
        ("attn.w_k", &mut b.w_k),
        ("attn.w_v", &mut b.w_v),
        ("attn.w_o", &mut b.w_o),
        ("attn.b_o", &mut b.b_o),
        ("ln2.g", &mut b.ln2_g),
        ("ln2.b", &mut b.ln2_b),
        ("mlp.w_1", &mut b.w_1),
        ("mlp.b_1", &mut b.b_1),
        ("mlp.w_2", &mut b.w_2),
        ("mlp.b_2", &mut b.b_2),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_round_trip() {
        let cfg = ModelConfig::default();
        let p = Params::init(&cfg, &mut RngStream::new(1));
        let mut q = p.zeros_like();
        q.assign_flat(&p.flatten());
        assert_eq!(p, q);
    }

    #[test]
    fn names_are_unique() {
        let cfg = ModelConfig { pooling: super::super::Pooling::Cls, ..Default::default() };
        let p = Params::init(&cfg, &mut RngStream::new(1));
        let mut names = Vec::new();
        p.visit(|n, _| names.push(n.to_string()));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"cls".to_string()));
    }

    #[test]
    fn init_is_bounded() {
        let p = Params::init(&ModelConfig::default(), &mut RngStream::new(3));
        assert!(p.embed_w.max_abs() <= 2.0 * INIT_STD);
        assert_eq!(p.blocks[0].b_o.max_abs(), 0.0);
        assert!(p.norm_g.as_slice().iter().all(|&g| g == 1.0));
    }
}
