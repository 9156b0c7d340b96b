use serde::{Deserialize, Serialize};

use crate::attention::ProjectionWeights;
use crate::numerics::dot;
use crate::{Error, Matrix, Result, RngStream};

/// Generator for clustered patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterModelConfig {
    pub n: usize,
    pub d_m: usize,
    /// Number of relevant patches.
    pub k1: usize,
    pub relevant_mean: Vec<f64>,
    /// Noisy patch `t` uses `noise_means[t % len]`.
    pub noise_means: Vec<Vec<f64>>,
    /// Noise scale; each coordinate has variance `σ² / d_m`.
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
}

/// How lemma experiments draw `W_Q, W_K, W_V` (entries `N(0, 1/d_m)`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    /// `W_K = W_Q`, so `W_Q W_Kᵀ` is positive semidefinite.
    #[default]
    Tied,
    Independent,
}

/// `count + 1` mutually orthogonal vectors of norm `norm` in `d` dimensions,
/// drawn by Gram–Schmidt on Gaussian vectors. The first is the relevant mean.
pub fn orthogonal_means(d: usize, count: usize, norm: f64, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    if count + 1 > d {
        return Err(Error::config(format!(
            "{} orthogonal means do not fit in dimension {d}",
            count + 1
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count + 1);
    while basis.len() < count + 1 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let nrm = dot(&v, &v).sqrt();
        if nrm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nrm);
        basis.push(v);
    }
    Ok(basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * norm).collect())
        .collect())
}

impl ClusterModelConfig {
    /// Relevant mean and `noise_clusters` noise means, all orthogonal with
    /// norm `mean_norm`, drawn from `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_orthogonal_noise(
        n: usize,
        d_m: usize,
        k1: usize,
        mean_norm: f64,
        noise_clusters: usize,
        sigma: f64,
        trials: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = RngStream::new(seed).fork(0x6d65616e);
        let mut means = orthogonal_means(d_m, noise_clusters, mean_norm, &mut rng)?;
        let relevant_mean = means.remove(0);
        let cfg = Self {
            n,
            d_m,
            k1,
            relevant_mean,
            noise_means: means,
            sigma,
            trials,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k1 > self.n {
            return Err(Error::config(format!("k1 = {} must lie in 1..={}", self.k1, self.n)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.trials == 0 {
            return Err(Error::config("trials must be positive"));
        }
        if self.relevant_mean.len() != self.d_m
            || self.noise_means.iter().any(|m| m.len() != self.d_m)
        {
            return Err(Error::config("every mean vector must have length d_m"));
        }
        if self.k1 < self.n && self.noise_means.is_empty() {
            return Err(Error::config("noisy patches need at least one noise mean"));
        }
        // Expected W_Q W_Kᵀ is a multiple of the identity under tied weights,
        // so separation is checked with the plain inner product.
        if !separation_holds(&self.all_means(), dot) {
            return Err(Error::config(
                "cluster means are not separated: self-similarity must exceed every cross term",
            ));
        }
        Ok(())
    }

    pub fn all_means(&self) -> Vec<Vec<f64>> {
        let mut v = vec![self.relevant_mean.clone()];
        v.extend(self.noise_means.iter().cloned());
        v
    }

    pub fn noise_std(&self) -> f64 {
        self.sigma / (self.d_m as f64).sqrt()
    }
}

/// `min_i sim(μ_i, μ_i) > max_{i≠j} |sim(μ_i, μ_j)|` and the minimum is positive.
pub fn separation_holds(means: &[Vec<f64>], sim: impl Fn(&[f64], &[f64]) -> f64) -> bool {
    let mut min_self = f64::INFINITY;
    let mut max_cross = 0.0f64;
    for (i, a) in means.iter().enumerate() {
        min_self = min_self.min(sim(a, a));
        for (j, b) in means.iter().enumerate() {
            if i != j {
                max_cross = max_cross.max(sim(a, b).abs());
            }
        }
    }
    min_self > 0.0 && min_self > max_cross
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSample {
    pub x: Matrix,
    /// `true` for relevant patches.
    pub relevant: Vec<bool>,
    /// Cluster index per row: 0 relevant, `1 + c` noise cluster `c`.
    pub cluster: Vec<usize>,
}

impl ClusterSample {
    pub fn relevant_indices(&self) -> Vec<usize> {
        self.relevant
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| r.then_some(i))
            .collect()
    }
}

pub fn sample_cluster_patches(cfg: &ClusterModelConfig, rng: &mut RngStream) -> Result<ClusterSample> {
    cfg.validate()?;
    let std = cfg.noise_std();
    let mut order: Vec<usize> = (0..cfg.n).collect();
    rng.shuffle(&mut order);
    let mut x = Matrix::zeros(cfg.n, cfg.d_m);
    let mut relevant = vec![false; cfg.n];
    let mut cluster = vec![0; cfg.n];
    for (src, &dst) in order.iter().enumerate() {
        let (mean, c) = if src < cfg.k1 {
            (&cfg.relevant_mean, 0)
        } else {
            let c = (src - cfg.k1) % cfg.noise_means.len();
            (&cfg.noise_means[c], c + 1)
        };
        for (o, &m) in x.row_mut(dst).iter_mut().zip(mean) {
            *o = m + std * rng.normal();
        }
        relevant[dst] = src < cfg.k1;
        cluster[dst] = c;
    }
    Ok(ClusterSample { x, relevant, cluster })
}

/// Draws projection weights, rejecting draws under which the cluster means
/// are not separated by the bilinear form `W_Q W_Kᵀ`.
pub fn draw_weights(
    means: &[Vec<f64>],
    d_m: usize,
    d: usize,
    scheme: WeightScheme,
    rng: &mut RngStream,
) -> Result<ProjectionWeights> {
    let std = 1.0 / (d_m as f64).sqrt();
    for _ in 0..1000 {
        let w_q = rng.normal_matrix(d_m, d, std);
        let w_k = match scheme {
            WeightScheme::Tied => w_q.clone(),
            WeightScheme::Independent => rng.normal_matrix(d_m, d, std),
        };
        let w_v = rng.normal_matrix(d_m, d, std);
        let proj: Vec<(Vec<f64>, Vec<f64>)> = means
            .iter()
            .map(|m| {
                let row = Matrix::from_vec(1, d_m, m.clone()).expect("mean length");
                (
                    row.matmul(&w_q).expect("shape").into_vec(),
                    row.matmul(&w_k).expect("shape").into_vec(),
                )
            })
            .collect();
        let sims: Vec<Vec<f64>> = (0..means.len())
            .map(|i| (0..means.len()).map(|j| dot(&proj[i].0, &proj[j].1)).collect())
            .collect();
        let idx: Vec<Vec<f64>> = (0..means.len()).map(|i| vec![i as f64]).collect();
        if separation_holds(&idx, |a, b| sims[a[0] as usize][b[0] as usize]) {
            return ProjectionWeights::new(w_q, w_k, w_v);
        }
    }
    Err(Error::config(
        "no weight draw in 1000 attempts separates the cluster means",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(sigma: f64) -> ClusterModelConfig {
        ClusterModelConfig::with_orthogonal_noise(12, 8, 4, 2.0, 3, sigma, 10, 9).unwrap()
    }

    #[test]
    fn means_are_orthogonal_with_matched_norm() {
        let c = cfg(1.0);
        let all = c.all_means();
        for (i, a) in all.iter().enumerate() {
            assert!((dot(a, a).sqrt() - 2.0).abs() < 1e-12);
            for b in &all[i + 1..] {
                assert!(dot(a, b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vanishing_noise_returns_means() {
        let c = cfg(1e-9);
        let s = sample_cluster_patches(&c, &mut RngStream::new(1)).unwrap();
        let all = c.all_means();
        for i in 0..c.n {
            for (a, b) in s.x.row(i).iter().zip(&all[s.cluster[i]]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert_eq!(s.relevant.iter().filter(|&&r| r).count(), 4);
    }

    #[test]
    fn relevant_rows_average_to_their_mean() {
        let mut c = cfg(1.0);
        c.n = 10_000;
        c.k1 = 10_000;
        let s = sample_cluster_patches(&c, &mut RngStream::new(2)).unwrap();
        let m = s.x.column_means();
        let tol = 3.0 * c.noise_std() / (10_000f64).sqrt();
        for (a, b) in m.row(0).iter().zip(&c.relevant_mean) {
            assert!((a - b).abs() < tol, "{a} vs {b}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = cfg(0.7);
        let a = sample_cluster_patches(&c, &mut RngStream::new(3)).unwrap();
        let b = sample_cluster_patches(&c, &mut RngStream::new(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = cfg(1.0);
        c.k1 = 0;
        assert!(c.validate().is_err());
        let mut c = cfg(1.0);
        c.sigma = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg(1.0);
        c.noise_means[0] = c.relevant_mean.clone();
        assert!(c.validate().is_err());
        let mut c = cfg(1.0);
        c.noise_means[1].pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn drawn_weights_separate_means() {
        let c = cfg(1.0);
        let mut rng = RngStream::new(4);
        let all = c.all_means();
        for (scheme, means) in [(WeightScheme::Tied, &all[..]), (WeightScheme::Independent, &all[..2])] {
            let w = draw_weights(means, 8, 8, scheme, &mut rng).unwrap();
            let m = w.w_q.matmul_nt(&w.w_k).unwrap();
            let sim = |a: &[f64], b: &[f64]| {
                let a = Matrix::from_vec(1, 8, a.to_vec()).unwrap();
                let b = Matrix::from_vec(8, 1, b.to_vec()).unwrap();
                a.matmul(&m).unwrap().matmul(&b).unwrap()[(0, 0)]
            };
            assert!(separation_holds(means, sim));
        }
    }
}
