//! In-memory datasets, the Gaussian-cluster generator, mini-batch ordering
//! and the `CKDS` binary export.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

/// Feature rows with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let (n, _) = features.dims2("Dataset")?;
        if n == 0 || labels.len() != n {
            return Err(Error::Shape {
                op: "Dataset",
                detail: format!("{} rows with {} labels", n, labels.len()),
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Index {
                index: y,
                len: class_count,
            });
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Tensor<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Number of samples per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Rows and labels at the given indices.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor<f64>, Vec<usize>)> {
        let x = self.features.select_rows(idx)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Writes the `CKDS` layout: magic, `u32` N, d, c, then `N·d` f64 values
    /// and `N` u16 labels, all little-endian.
    pub fn write_ckds<W: Write>(&self, mut w: W) -> Result<()> {
        let (n, d, c) = (self.len(), self.dim(), self.class_count);
        if c > usize::from(u16::MAX) + 1 {
            return Err(Error::Format(format!("{} classes do not fit u16 labels", c)));
        }
        w.write_all(b"CKDS")?;
        for v in [n, d, c] {
            w.write_all(&u32::try_from(v).map_err(|_| Error::Format("size exceeds u32".into()))?.to_le_bytes())?;
        }
        for &x in self.features.data() {
            w.write_all(&x.to_le_bytes())?;
        }
        for &y in &self.labels {
            w.write_all(&(y as u16).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_ckds<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < 16 {
            return Err(Error::Truncated { offset: buf.len() });
        }
        if &buf[..4] != b"CKDS" {
            return Err(Error::Format("bad CKDS magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
        let (n, d, c) = (u32_at(4), u32_at(8), u32_at(12));
        let need = 16 + n * d * 8 + n * 2;
        if buf.len() < need {
            return Err(Error::Truncated { offset: buf.len() });
        }
        let feats = buf[16..16 + n * d * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let labels = buf[16 + n * d * 8..need]
            .chunks_exact(2)
            .map(|b| usize::from(u16::from_le_bytes([b[0], b[1]])))
            .collect();
        Dataset::new(Tensor::new(vec![n, d], feats)?, labels, c)
    }
}

/// Train and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Gaussian-cluster dataset description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// Training samples per class; the test split gets `ceil(per_class / 5)`.
    pub per_class: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 500,
            dim: 16,
            center_scale: 3.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class < 2 || self.dim < 2 {
            return Err(Error::Config(format!(
                "synthetic data needs classes, per-class and dim >= 2 (got {}, {}, {})",
                self.classes, self.per_class, self.dim
            )));
        }
        if !(self.noise_sigma > 0.0) || !(self.center_scale >= 0.0) {
            return Err(Error::Config("noise must be positive and center scale non-negative".into()));
        }
        Ok(())
    }

    pub fn test_per_class(&self) -> usize {
        self.per_class.div_ceil(5)
    }

    /// Draws one centre per class uniformly in `[-s, s]^d`, then isotropic
    /// Gaussian samples around each centre.
    pub fn generate(&self) -> Result<Split> {
        self.validate()?;
        let mut rng = seeded(self.seed);
        let centers = self.draw_centers(&mut rng);
        let mut sample = |per_class: usize| -> Result<Dataset> {
            let mut feats = Vec::with_capacity(self.classes * per_class * self.dim);
            let mut labels = Vec::with_capacity(self.classes * per_class);
            for (k, center) in centers.iter().enumerate() {
                for _ in 0..per_class {
                    for &mu in center {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        feats.push(mu + self.noise_sigma * z);
                    }
                    labels.push(k);
                }
            }
            let n = labels.len();
            Dataset::new(Tensor::new(vec![n, self.dim], feats)?, labels, self.classes)
        };
        let train = sample(self.per_class)?;
        let test = sample(self.test_per_class())?;
        Ok(Split { train, test })
    }

    /// The cluster centres the generator draws for this spec.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        self.draw_centers(&mut seeded(self.seed))
    }

    fn draw_centers(&self, rng: &mut crate::rng::Rng) -> Vec<Vec<f64>> {
        let s = self.center_scale;
        (0..self.classes)
            .map(|_| {
                (0..self.dim)
                    .map(|_| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 })
                    .collect()
            })
            .collect()
    }
}

/// Shuffled full batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; a trailing partial batch is dropped.
pub fn batch_indices(n: usize, batch: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch == 0 || batch > n {
        return Err(Error::Config(format!(
            "batch size {} must be in 1..={}",
            batch, n
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeded(derive_seed(seed, &[epoch])));
    Ok(perm.chunks_exact(batch).map(<[usize]>::to_vec).collect())
}
