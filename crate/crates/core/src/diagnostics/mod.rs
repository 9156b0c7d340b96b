//! Layer-wise diagnostics computed from a captured forward pass:
//! token cosine similarity, spread of attention weights, residual branch
//! norm ratios and attention nonlocality on the patch grid.

mod metrics;
mod report;

pub use metrics::{attn_std, branch_ratio, cos_sim, nonlocality, Nonlocality};
pub use report::{diagnose, DiagnosticsReport, LayerReport, CSV_HEADER};

use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

/// Patch lattice; spatial tokens are laid out row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Euclidean distance between the centres of spatial patches `a` and `b`,
    /// in patch units.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (ra, ca) = ((a / self.cols) as f64, (a % self.cols) as f64);
        let (rb, cb) = ((b / self.cols) as f64, (b % self.cols) as f64);
        ((ra - rb).powi(2) + (ca - cb).powi(2)).sqrt()
    }

    /// Largest distance on the grid (corner to corner).
    pub fn max_distance(&self) -> f64 {
        let r = self.rows.saturating_sub(1) as f64;
        let c = self.cols.saturating_sub(1) as f64;
        (r * r + c * c).sqrt()
    }
}

/// One transformer block's captured activations.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// Tokens entering the block, `n × d_m`.
    pub tokens_in: Matrix,
    /// One `n × n` row-stochastic matrix per head.
    pub attention: Vec<Matrix>,
    /// Output of the attention branch before the residual add.
    pub attn_branch: Matrix,
    /// Tokens entering the MLP sub-block (after the attention residual).
    pub ffn_input: Matrix,
    /// Output of the MLP branch before the residual add.
    pub ffn_branch: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<LayerTrace>,
    pub grid: GridShape,
    /// Token 0 is a CLS token without a grid position.
    pub cls_present: bool,
}

impl AttentionTrace {
    pub fn n_tokens(&self) -> usize {
        self.grid.len() + usize::from(self.cls_present)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_tokens();
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.tokens_in.rows() != n {
                return Err(Error::config(format!(
                    "layer {l}: {} tokens but grid implies {n}",
                    layer.tokens_in.rows()
                )));
            }
            if layer.attention.is_empty() {
                return Err(Error::config(format!("layer {l}: no attention heads")));
            }
            for (h, a) in layer.attention.iter().enumerate() {
                if a.shape() != (n, n) {
                    return Err(Error::Shape {
                        op: "trace attention",
                        left: (n, n),
                        right: a.shape(),
                    });
                }
                for i in 0..n {
                    let s: f64 = a.row(i).iter().sum();
                    if (s - 1.0).abs() > 1e-10 || a.row(i).iter().any(|&x| x < 0.0) {
                        return Err(Error::NotDistribution(format!(
                            "layer {l} head {h} row {i} sums to {s}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
