use sha2::{Digest, Sha256};

use super::{Clutter, SyntheticTaskConfig};
use crate::lemmas::orthogonal_means;
use crate::{Error, Matrix, Result, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// One `n_patches × patch_dim` matrix per image.
    pub images: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Matrix>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::config(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::IndexOutOfRange { index: bad, len: classes });
        }
        if let Some(first) = images.first() {
            if let Some(m) = images.iter().find(|m| m.shape() != first.shape()) {
                return Err(Error::Shape {
                    op: "dataset images",
                    left: first.shape(),
                    right: m.shape(),
                });
            }
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Leading `n` images.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    /// SHA-256 over labels and the bit patterns of every entry.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.classes as u64).to_le_bytes());
        for (img, &l) in self.images.iter().zip(&self.labels) {
            h.update((l as u64).to_le_bytes());
            for v in img.as_slice() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub eval: Dataset,
    /// Per-class signal means.
    pub class_means: Vec<Vec<f64>>,
}

/// Images of `n_patches` patches: `signal_patches` at random positions drawn
/// around the class mean, the rest clutter. Splits are class-balanced.
pub fn generate_synthetic(cfg: &SyntheticTaskConfig, rng: &mut RngStream) -> Result<SyntheticData> {
    cfg.validate()?;
    let distractors = match cfg.clutter {
        Clutter::Distractors { count, .. } => count,
        _ => 0,
    };
    let basis = orthogonal_means(cfg.patch_dim, cfg.classes + distractors - 1, 1.0, rng)?;
    let class_means: Vec<Vec<f64>> = basis[..cfg.classes]
        .iter()
        .map(|v| v.iter().map(|x| x * cfg.signal_norm).collect())
        .collect();
    let distractor_means: Vec<Vec<f64>> = match cfg.clutter {
        Clutter::Distractors { norm, .. } => basis[cfg.classes..]
            .iter()
            .map(|v| v.iter().map(|x| x * norm).collect())
            .collect(),
        _ => Vec::new(),
    };
    let mut split = |per_class: usize| -> Result<Dataset> {
        let mut labels: Vec<usize> = (0..cfg.classes)
            .flat_map(|c| std::iter::repeat_n(c, per_class))
            .collect();
        rng.shuffle(&mut labels);
        let images = labels
            .iter()
            .map(|&c| image(cfg, &class_means[c], &distractor_means, rng))
            .collect();
        Dataset::new(images, labels, cfg.classes)
    };
    let train = split(cfg.train_per_class)?;
    let eval = split(cfg.eval_per_class)?;
    Ok(SyntheticData { train, eval, class_means })
}

fn image(cfg: &SyntheticTaskConfig, mean: &[f64], distractors: &[Vec<f64>], rng: &mut RngStream) -> Matrix {
    let n = cfg.n_patches;
    let mut slots: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut slots);
    let mut x = Matrix::zeros(n, cfg.patch_dim);
    for (rank, &slot) in slots.iter().enumerate() {
        let row = x.row_mut(slot);
        if rank < cfg.signal_patches {
            for (o, m) in row.iter_mut().zip(mean) {
                *o = m + cfg.sigma * rng.normal();
            }
            continue;
        }
        match cfg.clutter {
            Clutter::Off => {}
            Clutter::Gaussian { std } => row.iter_mut().for_each(|o| *o = std * rng.normal()),
            Clutter::Distractors { std, .. } => {
                let m = &distractors[rng.below(distractors.len())];
                for (o, c) in row.iter_mut().zip(m) {
                    *o = c + std * rng.normal();
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_balanced() {
        let d = generate_synthetic(&SyntheticTaskConfig::default(), &mut RngStream::new(0)).unwrap();
        assert_eq!(d.train.class_counts(), vec![64; 4]);
        assert_eq!(d.eval.class_counts(), vec![32; 4]);
    }

    #[test]
    fn fixed_seed_fixed_fingerprint() {
        let cfg = SyntheticTaskConfig::default();
        let a = generate_synthetic(&cfg, &mut RngStream::new(5)).unwrap();
        let b = generate_synthetic(&cfg, &mut RngStream::new(5)).unwrap();
        let c = generate_synthetic(&cfg, &mut RngStream::new(6)).unwrap();
        assert_eq!(a.train.fingerprint(), b.train.fingerprint());
        assert_ne!(a.train.fingerprint(), c.train.fingerprint());
    }

    #[test]
    fn noiseless_images_hold_exact_signal_rows() {
        let cfg = SyntheticTaskConfig {
            sigma: 0.0,
            clutter: Clutter::Off,
            ..Default::default()
        };
        let d = generate_synthetic(&cfg, &mut RngStream::new(1)).unwrap();
        for (img, &l) in d.train.images.iter().zip(&d.train.labels) {
            let signal = (0..img.rows())
                .filter(|&i| img.row(i) == &d.class_means[l][..])
                .count();
            let zero = (0..img.rows()).filter(|&i| img.row_norm(i) == 0.0).count();
            assert_eq!((signal, zero), (3, 13));
        }
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        assert!(Dataset::new(vec![Matrix::zeros(2, 2)], vec![], 2).is_err());
        assert!(Dataset::new(vec![Matrix::zeros(2, 2)], vec![2], 2).is_err());
    }
}
