use serde::{Deserialize, Serialize};

use super::cluster::{draw_weights, sample_cluster_patches, ClusterModelConfig, WeightScheme};
use super::result::{LemmaResult, LemmaTable, SweepRow};
use crate::numerics::{dot, mean, population_std};
use crate::{Error, Exec, Matrix, Result, RngStream};

/// Survivor-count sweep over the patch dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lemma2Config {
    pub n: usize,
    pub k1: usize,
    /// Patch dimensions, checked in the given order.
    pub d_grid: Vec<usize>,
    pub mean_norm: f64,
    pub noise_clusters: usize,
    pub sigma: f64,
    pub weights: WeightScheme,
    pub trials: usize,
    pub batch_size: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for Lemma2Config {
    fn default() -> Self {
        Self {
            n: 64,
            k1: 8,
            d_grid: vec![16, 64, 256],
            mean_norm: 1.0,
            noise_clusters: 3,
            sigma: 2.0,
            weights: WeightScheme::Tied,
            trials: 200,
            batch_size: 20,
            threshold: 0.9,
            seed: 0,
        }
    }
}

/// Keys scoring at least the lowest-scoring relevant key.
pub fn survivor_count(query: &[f64], keys: &Matrix, relevant: &[usize]) -> usize {
    let scores: Vec<f64> = (0..keys.rows()).map(|i| dot(query, keys.row(i))).collect();
    let floor = relevant
        .iter()
        .map(|&j| scores[j])
        .fold(f64::INFINITY, f64::min);
    scores.iter().filter(|&&s| s >= floor).count()
}

pub fn lemma2_experiment(cfg: &Lemma2Config, exec: Exec) -> Result<LemmaResult> {
    if cfg.d_grid.is_empty() {
        return Err(Error::config("d_grid must not be empty"));
    }
    let vacuous = cfg.k1 == cfg.n;
    let noise_clusters = if vacuous { 0 } else { cfg.noise_clusters };
    let mut counts: Vec<Vec<f64>> = Vec::with_capacity(cfg.d_grid.len());
    for (di, &d) in cfg.d_grid.iter().enumerate() {
        let cluster = ClusterModelConfig::with_orthogonal_noise(
            cfg.n,
            d,
            cfg.k1,
            cfg.mean_norm,
            noise_clusters,
            cfg.sigma,
            cfg.trials,
            cfg.seed ^ (d as u64).wrapping_mul(0x9E37_79B9),
        )?;
        let means = cluster.all_means();
        let root = RngStream::new(cfg.seed).fork(di as u64);
        let c = exec.try_map_indexed(cfg.trials, |t| -> Result<f64> {
            let mut rng = root.fork(t as u64);
            let sample = sample_cluster_patches(&cluster, &mut rng)?;
            let w = draw_weights(&means, d, d, cfg.weights, &mut rng)?;
            let relevant = sample.relevant_indices();
            let l = relevant[rng.below(relevant.len())];
            let q = sample.x.row_matrix(l).matmul(&w.w_q)?;
            let keys = sample.x.matmul(&w.w_k)?;
            Ok(survivor_count(q.row(0), &keys, &relevant) as f64)
        })?;
        counts.push(c);
    }

    let batch = cfg.batch_size.max(1);
    let batches = (cfg.trials / batch).max(1);
    let width = if cfg.trials >= batch { batch } else { cfg.trials };
    let mut hits = 0;
    for b in 0..batches {
        let means: Vec<f64> = counts
            .iter()
            .map(|c| mean(&c[b * width..(b + 1) * width]))
            .collect();
        if means.windows(2).all(|w| w[1] <= w[0]) {
            hits += 1;
        }
    }
    let fraction = hits as f64 / batches as f64;
    let pass = vacuous || fraction >= cfg.threshold;
    let criterion = if vacuous {
        format!("vacuous: every patch relevant so the count is always {}", cfg.n)
    } else {
        format!(
            "batch mean survivor count non-increasing in d_m in >= {:.0}% of batches (observed {:.1}%)",
            100.0 * cfg.threshold,
            100.0 * fraction
        )
    };
    let rows = cfg
        .d_grid
        .iter()
        .zip(&counts)
        .map(|(&d, c)| SweepRow {
            sweep_value: d as f64,
            mean: mean(c),
            std: population_std(c),
            trials: c.len(),
            criterion: criterion.clone(),
            pass,
        })
        .collect();
    Ok(LemmaResult {
        lemma: 2,
        tables: vec![LemmaTable {
            name: "lemma2_survivors".into(),
            sweep: "d_m".into(),
            rows,
        }],
        pass,
        vacuous,
        summary: vec![format!("{criterion}: {}", if pass { "PASS" } else { "FAIL" })],
    })
}
