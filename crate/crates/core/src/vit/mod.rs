//! Pre-norm vision transformer with a pluggable attention kernel, manual
//! backprop, Adam, a synthetic noisy-patch task and a binary checkpoint.

mod checkpoint;
mod config;
mod data;
mod model;
mod params;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{AttentionKind, Clutter, ModelConfig, Pooling, SyntheticTaskConfig, TrainConfig};
pub use data::{generate_synthetic, Dataset, SyntheticData};
pub use model::{argmax, build_model, ForwardPass, Model};
pub use params::{BlockParams, Params};
pub use train::{
    batch_gradient, capture_trace, epochs_to_target, evaluate, metrics_csv, paired_run, predict, prepare, synthetic_data, train,
    AdamState, Evaluation, MetricsRow, PairedOutcome, TrainOutcome, Trainer, METRICS_CSV_HEADER,
};
