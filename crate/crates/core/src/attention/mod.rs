//! Dense and k-NN attention kernels with their analytic derivatives.
//!
//! Scores are `Q Kᵀ / (√d · t)`. The fast k-NN kernel masks everything but
//! the `k` largest scores of each row with [`MASK_SENTINEL`](crate::MASK_SENTINEL)
//! before the softmax; the slow kernel gathers the selected keys per query
//! and normalises over just those. Both accumulate in the same order, so
//! for tie-free inputs they agree bit for bit.

mod backward;
mod config;
mod covariance;
mod kernels;
mod mask;

pub use backward::{attention_backward, attention_backward_from_weights, AttentionGrads};
pub use config::{AttentionConfig, ProjectionWeights, SelectionMetric};
pub use covariance::{
    lemma1_grad_wk_entry, lemma1_grad_wq_entry, masked_attention_row, weighted_covariance,
};
pub use kernels::{
    dense_attention, knn_attention_fast, knn_attention_slow, masked_attention, project_qkv,
    row_entropy, score_scale, scaled_scores, AttentionOutput, KnnOutput, SlowKnnOutput,
};
pub use mask::{row_topk_mask, selection_margin, TopKMask};
