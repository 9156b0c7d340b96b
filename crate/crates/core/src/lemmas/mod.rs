//! Monte-Carlo experiments on a clustered patch model.
//!
//! Each patch is its cluster mean plus isotropic Gaussian noise with
//! per-coordinate variance `σ² / d_m`. One cluster holds the query's
//! relevant patches, the rest are noise clusters. The experiments check
//! directional consequences only:
//!
//! * gradient scale: the analytic covariance form of `∂V̂_l/∂W_Q` matches
//!   finite differences, and k-NN gradients are compared with dense ones;
//! * noise distillation: `‖V̂_l − μ W_V‖∞` is smaller at `k = k1` than at `k = n`;
//! * survivor count: the number of keys scoring at least the worst relevant
//!   key shrinks as the patch dimension grows.
//!
//! Trials draw from `RngStream::fork(trial)` and are reduced in trial order,
//! so results do not depend on [`Exec`](crate::Exec).

mod cluster;
mod lemma1;
mod lemma2;
mod lemma3;
mod result;

pub use cluster::{
    draw_weights, orthogonal_means, sample_cluster_patches, separation_holds, ClusterModelConfig,
    ClusterSample, WeightScheme,
};
pub use lemma1::{lemma1_experiment, Lemma1Config};
pub use lemma2::{lemma2_experiment, survivor_count, Lemma2Config};
pub use lemma3::{lemma3_experiment, run_lemma3, Lemma3Config, Lemma3Outcome};
pub use result::{batch_fraction, LemmaResult, LemmaTable, SweepRow, SWEEP_CSV_HEADER};
