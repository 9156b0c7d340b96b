use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{build_model, generate_synthetic, AttentionKind, Dataset, Model, ModelConfig, Params, SyntheticData, TrainConfig};
use crate::diagnostics::{AttentionTrace, GridShape};
use crate::{Error, Exec, Matrix, Result, RngStream};

const INIT_TAG: u64 = 1;
const DATA_TAG: u64 = 2;
const SHUFFLE_TAG: u64 = 3;

pub const METRICS_CSV_HEADER: &str = "epoch,train_loss,train_acc,eval_acc,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Mean per-image loss over the epoch's updates.
    pub train_loss: f64,
    /// Accuracy on the full train split after the epoch.
    pub train_acc: f64,
    pub eval_acc: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch, self.train_loss, self.train_acc, self.eval_acc, self.wall_ms
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Fresh model and dataset for `train.seed`. Models with identical shapes
/// receive identical initial parameters.
pub fn prepare(model: &ModelConfig, train: &TrainConfig) -> Result<(Model, SyntheticData)> {
    train.validate()?;
    train.check_model(model)?;
    let m = build_model(model, &mut RngStream::new(train.seed).fork(INIT_TAG))?;
    Ok((m, synthetic_data(train)?))
}

/// The dataset [`prepare`] generates for `train.seed`.
pub fn synthetic_data(train: &TrainConfig) -> Result<SyntheticData> {
    generate_synthetic(&train.task, &mut RngStream::new(train.seed).fork(DATA_TAG))
}

/// Adam moments over the flattened parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One bias-corrected Adam update with decoupled weight decay.
    pub fn update(&mut self, params: &mut Params, grad: &Params, cfg: &TrainConfig) {
        self.step += 1;
        let g = grad.flatten();
        let mut p = params.flatten();
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..p.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            p[i] -= cfg.lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
        }
        params.assign_flat(&p);
    }
}

/// Mean loss and gradient over `batch`, reduced in sample order.
pub fn batch_gradient(model: &Model, data: &Dataset, batch: &[usize], exec: Exec) -> Result<(f64, Params)> {
    let per_sample = exec.try_map_indexed(batch.len(), |j| {
        let i = batch[j];
        model
            .loss_and_grad(&data.images[i], data.labels[i])
            .map(|(l, g, _)| (l, g))
    })?;
    let mut total = 0.0;
    let mut grad = model.params.zeros_like();
    for (l, g) in &per_sample {
        total += l;
        grad.accumulate(g);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale_in_place(inv);
    Ok((total * inv, grad))
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        Self::resume(model, AdamState::new(0), 0, config)
    }

    /// Continues from a saved state. An empty `adam` is replaced by zeros.
    pub fn resume(model: Model, adam: AdamState, epoch: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        config.check_model(&model.config)?;
        let n = model.n_params();
        let adam = if adam.m.is_empty() && adam.step == 0 {
            AdamState::new(n)
        } else {
            adam
        };
        if adam.m.len() != n || adam.v.len() != n {
            return Err(Error::config(format!(
                "optimizer state holds {} entries, model has {n}",
                adam.m.len()
            )));
        }
        Ok(Self { model, adam, epoch, config })
    }

    /// Runs one epoch. Batch order depends only on the seed and the epoch
    /// number, so a resumed run follows the uninterrupted trajectory.
    pub fn run_epoch(&mut self, data: &SyntheticData, exec: Exec) -> Result<MetricsRow> {
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let train = &data.train;
        let mut order: Vec<usize> = (0..train.len()).collect();
        RngStream::new(self.config.seed)
            .fork(SHUFFLE_TAG)
            .fork(epoch as u64)
            .shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let (loss, grad) = batch_gradient(&self.model, train, batch, exec).map_err(|e| match e {
                Error::NonFinite { .. } | Error::EmptyAttentionRow { .. } => Error::NumericalAbort {
                    epoch,
                    batch: b,
                    reason: e.to_string(),
                },
                e => e,
            })?;
            if !loss.is_finite() {
                return Err(Error::NumericalAbort {
                    epoch,
                    batch: b,
                    reason: format!("loss is {loss}"),
                });
            }
            if grad.flatten().iter().any(|g| !g.is_finite()) {
                return Err(Error::NumericalAbort {
                    epoch,
                    batch: b,
                    reason: "non-finite gradient".into(),
                });
            }
            loss_sum += loss * batch.len() as f64;
            self.adam.update(&mut self.model.params, &grad, &self.config);
        }
        let train_acc = evaluate(&self.model, train, exec)?.accuracy;
        let eval_acc = if data.eval.is_empty() {
            0.0
        } else {
            evaluate(&self.model, &data.eval, exec)?.accuracy
        };
        self.epoch = epoch;
        Ok(MetricsRow {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc,
            eval_acc,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs epochs until `until` are complete.
    pub fn run_until(&mut self, data: &SyntheticData, until: usize, exec: Exec) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.epoch < until {
            rows.push(self.run_epoch(data, exec)?);
        }
        Ok(rows)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub adam: AdamState,
    pub history: Vec<MetricsRow>,
}

/// Trains `model` on `data` for `cfg.epochs` epochs.
pub fn train(model: Model, cfg: &TrainConfig, data: &SyntheticData, exec: Exec) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, cfg.clone())?;
    let history = t.run_until(data, cfg.epochs, exec)?;
    Ok(TrainOutcome {
        model: t.model,
        adam: t.adam,
        history,
    })
}

/// First epoch whose train accuracy reaches `target`.
pub fn epochs_to_target(history: &[MetricsRow], target: f64) -> Option<usize> {
    history.iter().find(|r| r.train_acc >= target).map(|r| r.epoch)
}

#[derive(Clone, Debug)]
pub struct PairedOutcome {
    pub dense: Vec<MetricsRow>,
    pub knn: Vec<MetricsRow>,
    pub dense_epochs: Option<usize>,
    pub knn_epochs: Option<usize>,
}

impl PairedOutcome {
    /// k-NN reached the target no later than dense; a run that never
    /// reaches it counts as infinitely slow.
    pub fn knn_not_slower(&self) -> bool {
        match (self.knn_epochs, self.dense_epochs) {
            (Some(k), Some(d)) => k <= d,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => true,
        }
    }
}

/// Trains a dense and a k-NN model from the same seed, data and initial
/// parameters. `model.k` (default `⌈n/2⌉`) sets the k-NN arm.
pub fn paired_run(model: &ModelConfig, cfg: &TrainConfig, exec: Exec) -> Result<PairedOutcome> {
    let dense_cfg = model.with_kind(AttentionKind::Dense, model.k);
    let (dense_model, data) = prepare(&dense_cfg, cfg)?;
    let knn_model = Model {
        config: model.with_kind(AttentionKind::Knn, model.k),
        params: dense_model.params.clone(),
    };
    knn_model.config.validate()?;
    let dense = train(dense_model, cfg, &data, exec)?.history;
    let knn = train(knn_model, cfg, &data, exec)?.history;
    Ok(PairedOutcome {
        dense_epochs: epochs_to_target(&dense, cfg.target_acc),
        knn_epochs: epochs_to_target(&knn, cfg.target_acc),
        dense,
        knn,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn predict(model: &Model, images: &[Matrix], exec: Exec) -> Result<Vec<usize>> {
    exec.try_map_indexed(images.len(), |i| model.forward(&images[i]).map(|p| p.predicted()))
}

/// Top-1 accuracy and confusion matrix.
pub fn evaluate(model: &Model, data: &Dataset, exec: Exec) -> Result<Evaluation> {
    if data.classes != model.config.classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model {}",
            data.classes, model.config.classes
        )));
    }
    if data.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let pred = predict(model, &data.images, exec)?;
    let mut confusion = vec![vec![0; data.classes]; data.classes];
    let mut correct = 0usize;
    for (&p, &t) in pred.iter().zip(&data.labels) {
        confusion[t][p] += 1;
        correct += usize::from(p == t);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        confusion,
    })
}

/// Trace of one forward pass over the first image.
pub fn capture_trace(model: &Model, images: &[Matrix]) -> Result<AttentionTrace> {
    let x = images.first().ok_or_else(|| Error::config("capture_trace needs at least one image"))?;
    let pass = model.forward(x)?;
    let cfg = &model.config;
    let trace = AttentionTrace {
        layers: pass.layers(),
        grid: GridShape::new(cfg.grid_rows, cfg.grid_cols),
        cls_present: cfg.n_tokens() > cfg.n_patches(),
    };
    trace.validate()?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{Clutter, SyntheticTaskConfig};

    fn tiny() -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            grid_rows: 2,
            grid_cols: 2,
            patch_dim: 8,
            model_dim: 8,
            depth: 1,
            heads: 2,
            head_dim: 4,
            mlp_hidden: 16,
            classes: 2,
            ..Default::default()
        };
        let train = TrainConfig {
            epochs: 2,
            batch_size: 4,
            task: SyntheticTaskConfig {
                classes: 2,
                n_patches: 4,
                patch_dim: 8,
                signal_patches: 1,
                clutter: Clutter::Gaussian { std: 0.3 },
                train_per_class: 8,
                eval_per_class: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        (model, train)
    }

    #[test]
    fn zero_lr_leaves_parameters_and_loss_unchanged() {
        let (m, mut t) = tiny();
        t.lr = 0.0;
        let (model, data) = prepare(&m, &t).unwrap();
        let out = train(model.clone(), &t, &data, Exec::Sequential).unwrap();
        assert_eq!(out.model.params, model.params);
        assert_eq!(out.history[0].train_loss, out.history[1].train_loss);
    }

    #[test]
    fn parallel_matches_sequential_bit_for_bit() {
        let (m, t) = tiny();
        let (model, data) = prepare(&m, &t).unwrap();
        let a = train(model.clone(), &t, &data, Exec::Sequential).unwrap();
        let b = train(model, &t, &data, Exec::Parallel).unwrap();
        assert_eq!(a.model.params, b.model.params);
        let strip = |h: &[MetricsRow]| -> Vec<(f64, f64, f64)> { h.iter().map(|r| (r.train_loss, r.train_acc, r.eval_acc)).collect() };
        assert_eq!(strip(&a.history), strip(&b.history));
    }

    #[test]
    fn resume_follows_the_uninterrupted_trajectory() {
        let (m, mut t) = tiny();
        t.epochs = 3;
        let (model, data) = prepare(&m, &t).unwrap();
        let full = train(model.clone(), &t, &data, Exec::Sequential).unwrap();
        let mut first = Trainer::new(model, t.clone()).unwrap();
        first.run_until(&data, 1, Exec::Sequential).unwrap();
        let mut second = Trainer::resume(first.model, first.adam, first.epoch, t).unwrap();
        let rest = second.run_until(&data, 3, Exec::Sequential).unwrap();
        assert_eq!(second.model.params, full.model.params);
        assert_eq!(rest[1].train_loss, full.history[2].train_loss);
    }

    #[test]
    fn accuracy_is_confusion_trace_over_total() {
        let (m, t) = tiny();
        let (model, data) = prepare(&m, &t).unwrap();
        let e = evaluate(&model, &data.train, Exec::Sequential).unwrap();
        let trace: usize = (0..2).map(|i| e.confusion[i][i]).sum();
        let total: usize = e.confusion.iter().flatten().sum();
        assert_eq!(e.accuracy, trace as f64 / total as f64);
    }

    #[test]
    fn nan_input_aborts_with_coordinates() {
        let (m, t) = tiny();
        let (model, mut data) = prepare(&m, &t).unwrap();
        for img in &mut data.train.images {
            img.as_mut_slice()[0] = f64::NAN;
        }
        let err = train(model, &t, &data, Exec::Sequential).unwrap_err();
        assert!(matches!(err, Error::NumericalAbort { epoch: 1, batch: 0, .. }), "{err}");
    }

    #[test]
    fn trace_has_one_matrix_per_layer_and_head() {
        let (m, t) = tiny();
        let (model, data) = prepare(&m, &t).unwrap();
        let tr = capture_trace(&model, &data.train.images).unwrap();
        assert_eq!(tr.layers.len(), 1);
        assert_eq!(tr.layers[0].attention.len(), 2);
        assert_eq!(tr.layers[0].attention[0].shape(), (4, 4));
    }
}
