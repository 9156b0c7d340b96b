use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    Dense,
    Knn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Learned classification token prepended to the patches.
    Cls,
    /// Mean over all tokens.
    #[default]
    Gap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Length of a flattened input patch.
    pub patch_dim: usize,
    /// Token width; must equal `heads * head_dim`.
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    #[serde(default)]
    pub kind: AttentionKind,
    /// Keys kept per query when `kind` is `knn`; `None` means `⌈n/2⌉`.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub pooling: Pooling,
    pub classes: usize,
    #[serde(default = "one")]
    pub temperature: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_rows: 4,
            grid_cols: 4,
            patch_dim: 16,
            model_dim: 32,
            depth: 2,
            heads: 2,
            head_dim: 16,
            mlp_hidden: 64,
            kind: AttentionKind::Dense,
            k: None,
            pooling: Pooling::Gap,
            classes: 4,
            temperature: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Sequence length including the CLS token when present.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + usize::from(self.pooling == Pooling::Cls)
    }

    pub fn effective_k(&self) -> usize {
        self.k.unwrap_or_else(|| self.n_tokens().div_ceil(2))
    }

    /// Same model with a different attention kernel; parameter shapes are
    /// unchanged.
    pub fn with_kind(&self, kind: AttentionKind, k: Option<usize>) -> Self {
        Self { kind, k, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
            ("patch_dim", self.patch_dim),
            ("model_dim", self.model_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.model_dim != self.heads * self.head_dim {
            return Err(Error::config(format!(
                "model_dim {} != heads {} x head_dim {}",
                self.model_dim, self.heads, self.head_dim
            )));
        }
        if self.kind == AttentionKind::Knn {
            let k = self.effective_k();
            if k == 0 || k > self.n_tokens() {
                return Err(Error::KOutOfRange { k, n: self.n_tokens() });
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive and finite"));
        }
        Ok(())
    }
}

/// Noise added to the patches that are not class signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Clutter {
    /// Zero patches.
    Off,
    /// Isotropic Gaussian patches with per-coordinate std `std`.
    Gaussian { std: f64 },
    /// Patches drawn around one of `count` fixed distractor means of norm
    /// `norm`, chosen uniformly per patch, plus noise `std`.
    Distractors { count: usize, norm: f64, std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskConfig {
    pub classes: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    /// Signal patches per image.
    pub signal_patches: usize,
    /// Norm of the per-class signal means (mutually orthogonal).
    pub signal_norm: f64,
    /// Per-coordinate std of the noise around the class mean.
    pub sigma: f64,
    pub clutter: Clutter,
    pub train_per_class: usize,
    pub eval_per_class: usize,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            n_patches: 16,
            patch_dim: 16,
            signal_patches: 3,
            signal_norm: 1.0,
            sigma: 0.25,
            clutter: Clutter::Distractors {
                count: 4,
                norm: 1.0,
                std: 0.25,
            },
            train_per_class: 64,
            eval_per_class: 32,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.patch_dim == 0 || self.train_per_class == 0 {
            return Err(Error::config("classes, patch_dim and train_per_class must be positive"));
        }
        if self.signal_patches == 0 || self.signal_patches >= self.n_patches {
            return Err(Error::config(format!(
                "signal_patches must be in 1..{} (got {})",
                self.n_patches, self.signal_patches
            )));
        }
        let orthogonal = self.classes
            + match self.clutter {
                Clutter::Distractors { count, .. } => count,
                _ => 0,
            };
        if orthogonal > self.patch_dim {
            return Err(Error::config(format!(
                "{orthogonal} orthogonal means do not fit in patch_dim {}",
                self.patch_dim
            )));
        }
        let bad = |x: f64| !(x.is_finite() && x >= 0.0);
        if bad(self.sigma) || bad(self.signal_norm) || self.signal_norm == 0.0 {
            return Err(Error::config("sigma must be >= 0 and signal_norm > 0"));
        }
        match self.clutter {
            Clutter::Off => {}
            Clutter::Gaussian { std } => {
                if bad(std) {
                    return Err(Error::config("clutter std must be >= 0"));
                }
            }
            Clutter::Distractors { count, norm, std } => {
                if count == 0 || bad(norm) || bad(std) {
                    return Err(Error::config("distractor count must be positive, norm and std >= 0"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay applied to every parameter.
    pub weight_decay: f64,
    pub seed: u64,
    /// Train accuracy that counts as converged in paired runs.
    pub target_acc: f64,
    pub task: SyntheticTaskConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            target_acc: 0.9,
            task: SyntheticTaskConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.lr) || !finite_nonneg(self.weight_decay) {
            return Err(Error::config("lr and weight_decay must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.target_acc) {
            return Err(Error::config("target_acc must lie in [0, 1]"));
        }
        self.task.validate()
    }

    /// Checks that the task feeds the model.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        if self.task.n_patches != model.n_patches()
            || self.task.patch_dim != model.patch_dim
            || self.task.classes != model.classes
        {
            return Err(Error::config(format!(
                "task (patches {}, patch_dim {}, classes {}) does not match model (patches {}, patch_dim {}, classes {})",
                self.task.n_patches,
                self.task.patch_dim,
                self.task.classes,
                model.n_patches(),
                model.patch_dim,
                model.classes
            )));
        }
        Ok(())
    }
}
