use serde::{Deserialize, Serialize};

use super::cluster::{draw_weights, sample_cluster_patches, ClusterModelConfig, WeightScheme};
use super::result::{batch_fraction, LemmaResult, LemmaTable, SweepRow};
use crate::attention::{dense_attention, knn_attention_fast};
use crate::numerics::{mean, population_std};
use crate::{Error, Exec, Matrix, Result, RngStream};

/// Noise-distillation sweep: error of the query's attention output against
/// its cluster mean, over `k` and noise scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lemma3Config {
    pub n: usize,
    pub d_m: usize,
    pub k1: usize,
    pub mean_norm: f64,
    pub noise_clusters: usize,
    pub sigmas: Vec<f64>,
    /// `k1` and `n` are always added.
    pub k_grid: Vec<usize>,
    /// Head dimension; `0` means `d_m`.
    pub head_dim: usize,
    pub weights: WeightScheme,
    pub trials: usize,
    pub batch_size: usize,
    /// Required fraction of batches with `err(k1) < err(n)`.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for Lemma3Config {
    fn default() -> Self {
        Self {
            n: 64,
            d_m: 32,
            k1: 16,
            mean_norm: 2.0,
            noise_clusters: 3,
            sigmas: vec![0.5, 1.0, 2.0],
            k_grid: vec![1, 2, 4, 8, 16, 32, 64],
            head_dim: 0,
            weights: WeightScheme::Tied,
            trials: 500,
            batch_size: 20,
            threshold: 0.95,
            seed: 0,
        }
    }
}

impl Lemma3Config {
    pub fn head_dim(&self) -> usize {
        if self.head_dim == 0 {
            self.d_m
        } else {
            self.head_dim
        }
    }

    /// Cluster model at noise scale `sigma`. Means depend only on `seed`,
    /// so every sigma shares them.
    pub fn cluster(&self, sigma: f64) -> Result<ClusterModelConfig> {
        ClusterModelConfig::with_orthogonal_noise(
            self.n,
            self.d_m,
            self.k1,
            self.mean_norm,
            self.noise_clusters,
            sigma,
            self.trials,
            self.seed,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lemma3Outcome {
    pub sigma: f64,
    /// Sorted, deduplicated, always contains `k1` and `n`.
    pub k_grid: Vec<usize>,
    /// `errors[ki][trial]` = `‖V̂_l − μ W_V‖∞` at `k_grid[ki]`.
    pub errors: Vec<Vec<f64>>,
    /// Fraction of selected patches that are noisy.
    pub rho: Vec<Vec<f64>>,
    /// Same error computed by the dense kernel.
    pub dense_errors: Vec<f64>,
    /// `k = n` errors equal the dense errors bit for bit.
    pub dense_matches_full: bool,
    /// Fraction of batches with mean `err(k1) < err(n)`.
    pub fraction: f64,
    pub pass: bool,
}

struct Trial {
    errors: Vec<f64>,
    rho: Vec<f64>,
    dense_error: f64,
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn lemma3_experiment(
    cluster: &ClusterModelConfig,
    scheme: WeightScheme,
    head_dim: usize,
    k_grid: &[usize],
    batch_size: usize,
    threshold: f64,
    exec: Exec,
) -> Result<Lemma3Outcome> {
    cluster.validate()?;
    let n = cluster.n;
    let mut grid: Vec<usize> = k_grid.to_vec();
    grid.extend([cluster.k1, n]);
    grid.sort_unstable();
    grid.dedup();
    if let Some(&bad) = grid.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::KOutOfRange { k: bad, n });
    }
    let means = cluster.all_means();
    let root = RngStream::new(cluster.seed);

    let trials = exec.try_map_indexed(cluster.trials, |t| -> Result<Trial> {
        let mut rng = root.fork(t as u64);
        let sample = sample_cluster_patches(cluster, &mut rng)?;
        let w = draw_weights(&means, cluster.d_m, head_dim, scheme, &mut rng)?;
        let relevant = sample.relevant_indices();
        let l = relevant[rng.below(relevant.len())];

        let q = sample.x.row_matrix(l).matmul(&w.w_q)?;
        let k = sample.x.matmul(&w.w_k)?;
        let v = sample.x.matmul(&w.w_v)?;
        let mu = Matrix::from_vec(1, cluster.d_m, cluster.relevant_mean.clone())?;
        let target = mu.matmul(&w.w_v)?;

        let mut errors = Vec::with_capacity(grid.len());
        let mut rho = Vec::with_capacity(grid.len());
        for &kk in &grid {
            let out = knn_attention_fast(&q, &k, &v, kk, 1.0)?;
            errors.push(sup_distance(out.output.row(0), target.row(0)));
            let noisy = out.mask.row_indices(0).iter().filter(|&&j| !sample.relevant[j]).count();
            rho.push(noisy as f64 / kk as f64);
        }
        let dense = dense_attention(&q, &k, &v, 1.0)?;
        Ok(Trial {
            errors,
            rho,
            dense_error: sup_distance(dense.output.row(0), target.row(0)),
        })
    })?;

    let errors: Vec<Vec<f64>> = (0..grid.len())
        .map(|ki| trials.iter().map(|t| t.errors[ki]).collect())
        .collect();
    let rho: Vec<Vec<f64>> = (0..grid.len())
        .map(|ki| trials.iter().map(|t| t.rho[ki]).collect())
        .collect();
    let dense_errors: Vec<f64> = trials.iter().map(|t| t.dense_error).collect();
    let full = grid.len() - 1;
    let dense_matches_full = errors[full]
        .iter()
        .zip(&dense_errors)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let k1_idx = grid.iter().position(|&k| k == cluster.k1).expect("k1 in grid");
    let (fraction, pass) = if cluster.k1 == n {
        (1.0, true)
    } else {
        let f = batch_fraction(&errors[k1_idx], &errors[full], batch_size, |a, b| a < b);
        (f, f >= threshold)
    };
    Ok(Lemma3Outcome {
        sigma: cluster.sigma,
        k_grid: grid,
        errors,
        rho,
        dense_errors,
        dense_matches_full,
        fraction,
        pass,
    })
}

fn sigma_tag(sigma: f64) -> String {
    format!("{sigma}").replace('.', "p").replace('-', "m")
}

/// Runs the sigma sweep and assembles the result tables.
pub fn run_lemma3(cfg: &Lemma3Config, exec: Exec) -> Result<(LemmaResult, Vec<Lemma3Outcome>)> {
    if cfg.sigmas.is_empty() {
        return Err(Error::config("sigmas must not be empty"));
    }
    let mut outcomes = Vec::new();
    let mut tables = Vec::new();
    let mut summary = Vec::new();
    for &sigma in &cfg.sigmas {
        let cluster = cfg.cluster(sigma)?;
        let o = lemma3_experiment(
            &cluster,
            cfg.weights,
            cfg.head_dim(),
            &cfg.k_grid,
            cfg.batch_size,
            cfg.threshold,
            exec,
        )?;
        let criterion = format!(
            "batch mean error at k={} < k={} in >= {:.0}% of batches (observed {:.1}%)",
            cfg.k1,
            cfg.n,
            100.0 * cfg.threshold,
            100.0 * o.fraction
        );
        summary.push(format!("sigma={sigma}: {criterion}: {}", if o.pass { "PASS" } else { "FAIL" }));
        let rows = |data: &Vec<Vec<f64>>| -> Vec<SweepRow> {
            o.k_grid
                .iter()
                .zip(data)
                .map(|(&k, xs)| SweepRow {
                    sweep_value: k as f64,
                    mean: mean(xs),
                    std: population_std(xs),
                    trials: xs.len(),
                    criterion: criterion.clone(),
                    pass: o.pass,
                })
                .collect()
        };
        tables.push(LemmaTable {
            name: format!("lemma3_error_sigma_{}", sigma_tag(sigma)),
            sweep: "k".into(),
            rows: rows(&o.errors),
        });
        tables.push(LemmaTable {
            name: format!("lemma3_rho_sigma_{}", sigma_tag(sigma)),
            sweep: "k".into(),
            rows: rows(&o.rho),
        });
        outcomes.push(o);
    }
    let pass = outcomes.iter().all(|o| o.pass);
    Ok((
        LemmaResult {
            lemma: 3,
            tables,
            pass,
            vacuous: cfg.k1 == cfg.n,
            summary,
        },
        outcomes,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(sigma: f64, trials: usize) -> ClusterModelConfig {
        ClusterModelConfig::with_orthogonal_noise(32, 16, 8, 2.0, 3, sigma, trials, 5).unwrap()
    }

    #[test]
    fn vanishing_noise_distils_perfectly_at_k1() {
        let c = small(1e-9, 10);
        let o = lemma3_experiment(&c, WeightScheme::Tied, 16, &[], 5, 0.95, Exec::Sequential).unwrap();
        let k1 = o.k_grid.iter().position(|&k| k == 8).unwrap();
        assert!(o.errors[k1].iter().all(|&e| e < 1e-6), "{:?}", o.errors[k1]);
        assert!(o.rho[k1].iter().all(|&r| r == 0.0));
        assert!(o.pass);
    }

    #[test]
    fn full_attention_matches_dense_path() {
        let o = lemma3_experiment(&small(1.0, 20), WeightScheme::Tied, 16, &[4], 10, 0.95, Exec::Sequential)
            .unwrap();
        assert!(o.dense_matches_full);
        assert_eq!(o.k_grid, vec![4, 8, 32]);
        assert!(o.errors.iter().all(|e| e.len() == 20));
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let c = small(1.0, 12);
        let a = lemma3_experiment(&c, WeightScheme::Tied, 16, &[], 4, 0.95, Exec::Sequential).unwrap();
        let b = lemma3_experiment(&c, WeightScheme::Tied, 16, &[], 4, 0.95, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_out_of_range_k() {
        let c = small(1.0, 2);
        assert!(lemma3_experiment(&c, WeightScheme::Tied, 16, &[33], 1, 0.95, Exec::Sequential).is_err());
    }

    #[test]
    fn rho_does_not_grow_as_noise_shrinks() {
        // Common random numbers across sigma, 10 batches of 20.
        let hi = lemma3_experiment(&small(2.0, 200), WeightScheme::Tied, 16, &[], 20, 0.95, Exec::Parallel).unwrap();
        let lo = lemma3_experiment(&small(0.5, 200), WeightScheme::Tied, 16, &[], 20, 0.95, Exec::Parallel).unwrap();
        let k1 = hi.k_grid.iter().position(|&k| k == 8).unwrap();
        let f = batch_fraction(&lo.rho[k1], &hi.rho[k1], 20, |a, b| a <= b);
        assert!(f >= 0.9, "fraction {f}");
    }
}
