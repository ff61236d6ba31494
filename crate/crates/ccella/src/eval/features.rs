//! Frozen random-weight feature extractor and streaming feature
//! statistics.
//!
//! The extractor is a seed-fixed three-stage CNN with global pooling; it
//! stands in for a pretrained feature network. Statistics accumulate in
//! one pass (mean plus centered second moment, upper triangle only) and
//! merge associatively:
//!   δ = μ_b − μ_a,  μ = μ_a + δ·n_b/n,  M2 = M2_a + M2_b + δδᵀ·n_a·n_b/n.

use serde::{Deserialize, Serialize};
use tensor_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Init, LiveParams, ParamStore};

pub const FEATURE_DIM: usize = 32;
/// Below this many samples per side, distance estimates get a warning.
pub const RECOMMENDED_SAMPLES: usize = 256;

const FEATURE_SEED: u64 = 0xfea7;

pub struct FeatureExtractor {
    params: ParamStore,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let mut params = ParamStore::new();
        let s = FEATURE_SEED;
        params.register(s, "feat.c1.w", &[8, 1, 3, 3], Init::FanIn(9));
        params.register(s, "feat.c1.b", &[8, 1, 1], Init::Zeros);
        params.register(s, "feat.c2.w", &[16, 8, 3, 3], Init::FanIn(72));
        params.register(s, "feat.c2.b", &[16, 1, 1], Init::Zeros);
        params.register(s, "feat.c3.w", &[FEATURE_DIM, 16, 3, 3], Init::FanIn(144));
        params.register(s, "feat.c3.b", &[FEATURE_DIM, 1, 1], Init::Zeros);
        FeatureExtractor { params }
    }

    /// Byte-stable parameter fingerprint (frozen-extractor check).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, t) in self.params.iter() {
            for v in t.data() {
                h ^= (*v as f64).to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    fn conv_features(&self, p: &LiveParams, img: &Tensor) -> Result<Vec<f64>> {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let x = img.reshape(&[1, 1, h, w])?;
        let x = x
            .conv2d(p.get("feat.c1.w")?, 2, 1)?
            .add(p.get("feat.c1.b")?)?
            .silu();
        let x = x
            .conv2d(p.get("feat.c2.w")?, 2, 1)?
            .add(p.get("feat.c2.b")?)?
            .silu();
        let x = x
            .conv2d(p.get("feat.c3.w")?, 2, 1)?
            .add(p.get("feat.c3.b")?)?
            .silu();
        // global mean pool to [FEATURE_DIM]
        let c = x.shape()[1];
        let hw = x.len() / c;
        let flat = x.reshape(&[c, hw])?;
        let pooled = flat.mean_axis(1, false)?;
        Ok(pooled.data().iter().map(|&v| v as f64).collect())
    }

    /// Orientation-symmetrized: plane and its transpose are averaged, so
    /// slice features do not depend on row/column order. This is what
    /// makes per-axis planar distances exactly covariant under volume
    /// axis permutations.
    fn forward(&self, p: &LiveParams, img: &Tensor) -> Result<Vec<f64>> {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let a = self.conv_features(p, img)?;
        let t = img.reshape(&[h, w])?.transpose_last2()?.reshape(&[1, w, h])?;
        let b = self.conv_features(p, &t)?;
        Ok(a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect())
    }

    /// Features of one 2-D slice `[1,H,W]`.
    pub fn slice_features(&self, slice: &Tensor) -> Result<Vec<f64>> {
        self.forward(&self.params.frozen(), slice)
    }

    /// Volume descriptor: per-slice features averaged over the leading
    /// (slice) axis. A single-slice image is just its own slice.
    pub fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        if image.rank() != 3 {
            return Err(Error::Config(format!(
                "feature extractor expects [S,H,W], got {:?}",
                image.shape()
            )));
        }
        let (s, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let p = self.params.frozen();
        let mut acc = vec![0.0f64; FEATURE_DIM];
        for zi in 0..s {
            let plane = image.slice_axis(0, zi, zi + 1)?.reshape(&[1, h, w])?;
            let f = self.forward(&p, &plane)?;
            for (a, v) in acc.iter_mut().zip(f) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a /= s as f64;
        }
        Ok(acc)
    }
}

/// Streaming mean/covariance of feature vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureStats {
    pub dim: usize,
    pub count: usize,
    mean: Vec<f64>,
    /// Upper triangle (row-major, i <= j) of Σ(x−μ)(x−μ)ᵀ.
    m2_upper: Vec<f64>,
}

fn tri_index(dim: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    i * dim - i * (i + 1) / 2 + j
}

impl FeatureStats {
    pub fn new(dim: usize) -> Self {
        FeatureStats {
            dim,
            count: 0,
            mean: vec![0.0; dim],
            m2_upper: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    /// One-pass accumulation of a single observation.
    pub fn push(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.dim, "feature dimension mismatch");
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        let delta2: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        for i in 0..self.dim {
            for j in i..self.dim {
                self.m2_upper[tri_index(self.dim, i, j)] += delta[i] * delta2[j];
            }
        }
    }

    /// Associative merge of two accumulators.
    pub fn merge(&self, other: &FeatureStats) -> FeatureStats {
        assert_eq!(self.dim, other.dim);
        if other.count == 0 {
            return self.clone();
        }
        if self.count == 0 {
            return other.clone();
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other
            .mean
            .iter()
            .zip(&self.mean)
            .map(|(b, a)| b - a)
            .collect();
        let mean: Vec<f64> = self
            .mean
            .iter()
            .zip(&delta)
            .map(|(a, d)| a + d * nb / n)
            .collect();
        let mut m2_upper = vec![0.0; self.m2_upper.len()];
        for i in 0..self.dim {
            for j in i..self.dim {
                let k = tri_index(self.dim, i, j);
                m2_upper[k] =
                    self.m2_upper[k] + other.m2_upper[k] + delta[i] * delta[j] * na * nb / n;
            }
        }
        FeatureStats {
            dim: self.dim,
            count: self.count + other.count,
            mean,
            m2_upper,
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Sample covariance (n−1 denominator), exactly symmetric.
    pub fn covariance(&self) -> Result<Vec<f64>> {
        if self.count < 2 {
            return Err(Error::Config(format!(
                "need at least 2 samples for covariance, have {}",
                self.count
            )));
        }
        let denom = (self.count - 1) as f64;
        let mut cov = vec![0.0; self.dim * self.dim];
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.m2_upper[tri_index(self.dim, i, j)] / denom;
                cov[i * self.dim + j] = v;
                cov[j * self.dim + i] = v;
            }
        }
        Ok(cov)
    }

    /// Whether the sample count supports a full-rank covariance estimate.
    pub fn full_rank_expected(&self) -> bool {
        self.count >= self.dim + 1
    }
}

/// Extract features for a set of images and accumulate their statistics.
pub fn extract_features(extractor: &FeatureExtractor, images: &[Tensor]) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::Config(format!(
            "feature statistics need at least 2 images, got {}",
            images.len()
        )));
    }
    let mut stats = FeatureStats::new(FEATURE_DIM);
    for img in images {
        stats.push(&extractor.features(img)?);
    }
    Ok(stats)
}
