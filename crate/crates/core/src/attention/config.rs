use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result, RngStream};

/// How the slow kernel ranks keys for a query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    /// Largest `q · k` first. Same ranking as the fast kernel.
    #[default]
    Dot,
    /// Smallest `‖q - k‖` first.
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    /// Token count.
    pub n: usize,
    /// Head dimension.
    pub d: usize,
    /// Model dimension, `heads * d`.
    pub d_model: usize,
    pub heads: usize,
    /// Keys kept per query, `1..=n`.
    pub k: usize,
    #[serde(default)]
    pub selection_metric: SelectionMetric,
    #[serde(default = "one")]
    pub temperature: f64,
}

fn one() -> f64 {
    1.0
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.heads == 0 {
            return Err(Error::config("n, d and heads must be positive"));
        }
        if self.k == 0 || self.k > self.n {
            return Err(Error::KOutOfRange { k: self.k, n: self.n });
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.d_model != self.heads * self.d {
            return Err(Error::config(format!(
                "d_model {} != heads {} x d {}",
                self.d_model, self.heads, self.d
            )));
        }
        Ok(())
    }

    pub fn score_scale(&self) -> f64 {
        super::score_scale(self.d, self.temperature)
    }
}

/// Single-head projections `W_Q, W_K, W_V`, each `d_model × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl ProjectionWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        let w = Self { w_q, w_k, w_v };
        w.validate()?;
        Ok(w)
    }

    /// i.i.d. `N(0, std²)` entries.
    pub fn random(d_model: usize, d: usize, std: f64, rng: &mut RngStream) -> Self {
        Self {
            w_q: rng.normal_matrix(d_model, d, std),
            w_k: rng.normal_matrix(d_model, d, std),
            w_v: rng.normal_matrix(d_model, d, std),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d(&self) -> usize {
        self.w_q.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.w_q.shape();
        for (name, m) in [("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if m.shape() != s {
                return Err(Error::Shape {
                    op: if name == "w_k" { "projection w_k" } else { "projection w_v" },
                    left: s,
                    right: m.shape(),
                });
            }
        }
        Ok(())
    }
}
