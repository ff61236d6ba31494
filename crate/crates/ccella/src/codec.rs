//! Frozen image↔latent codec: lossless patchify (space-to-depth) followed
//! by a fixed per-channel affine whose statistics are frozen from a seeded
//! calibration pass. No codec parameter ever joins a gradient tape as a
//! variable.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensor_core::{load_tensor, save_tensor, Elem, Tensor};

use crate::error::{Error, Result};
use crate::phantom::{generate_phantom, PhantomConfig};

pub const DEFAULT_PATCH: usize = 4;
pub const CALIBRATION_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecMeta {
    pub patch: usize,
    pub image_shape: Vec<usize>,
    pub calibration_seed: u64,
    pub calibration_samples: usize,
}

pub struct LatentCodec {
    pub meta: CodecMeta,
    /// `[C·p², 1, 1]`, broadcastable over the latent.
    mean: Tensor,
    std: Tensor,
}

impl LatentCodec {
    /// Freeze per-channel statistics from a seeded calibration pass over
    /// procedurally generated phantoms.
    pub fn calibrate(phantom: &PhantomConfig, patch: usize, seed: u64) -> Result<Self> {
        if phantom.height % patch != 0 || phantom.width % patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch {patch}",
                phantom.height, phantom.width
            )));
        }
        let channels = phantom.slices * patch * patch;
        let mut sum = vec![0.0f64; channels];
        let mut sumsq = vec![0.0f64; channels];
        let mut per_channel = 0usize;
        for i in 0..CALIBRATION_SAMPLES {
            let s = generate_phantom(phantom, seed.wrapping_add(i as u64), 0.48);
            let z = s.image.space_to_depth(patch)?;
            let hw = z.len() / channels;
            per_channel += hw;
            for c in 0..channels {
                for &v in &z.data()[c * hw..(c + 1) * hw] {
                    sum[c] += v as f64;
                    sumsq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let n = per_channel as f64;
        let mut mean = vec![0.0 as Elem; channels];
        let mut std = vec![0.0 as Elem; channels];
        for c in 0..channels {
            let m = sum[c] / n;
            let var = (sumsq[c] / n - m * m).max(0.0);
            mean[c] = m as Elem;
            std[c] = (var.sqrt().max(1e-3)) as Elem;
        }
        Ok(LatentCodec {
            meta: CodecMeta {
                patch,
                image_shape: phantom.image_shape(),
                calibration_seed: seed,
                calibration_samples: CALIBRATION_SAMPLES,
            },
            mean: Tensor::new(&[channels, 1, 1], mean)?,
            std: Tensor::new(&[channels, 1, 1], std)?,
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.mean.len()
    }

    /// `[C·p², H/p, W/p]` for the calibrated image shape.
    pub fn latent_shape(&self) -> Vec<usize> {
        let p = self.meta.patch;
        vec![
            self.meta.image_shape[0] * p * p,
            self.meta.image_shape[1] / p,
            self.meta.image_shape[2] / p,
        ]
    }

    /// Image `[S,H,W]` (values in [0,1]) to normalized latent.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape() != self.meta.image_shape.as_slice() {
            return Err(Error::Config(format!(
                "encode: image shape {:?} does not match codec {:?}",
                image.shape(),
                self.meta.image_shape
            )));
        }
        let z = image.space_to_depth(self.meta.patch)?;
        Ok(z.sub(&self.mean)?.div(&self.std)?)
    }

    /// Latent back to image space. No clamping here; clamp only at final
    /// image export so round-trips stay exact.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        if latent.shape() != self.latent_shape().as_slice() {
            return Err(Error::Config(format!(
                "decode: latent shape {:?} does not match codec {:?}",
                latent.shape(),
                self.latent_shape()
            )));
        }
        let z = latent.mul(&self.std)?.add(&self.mean)?;
        Ok(z.depth_to_space(self.meta.patch)?)
    }

    /// Decode and clamp to [0,1] for image export.
    pub fn decode_clamped(&self, latent: &Tensor) -> Result<Tensor> {
        let img = self.decode(latent)?;
        let data = img.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect();
        Ok(Tensor::new(img.shape(), data)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&self.meta)?)?;
        save_tensor(dir.join("mean.tnsr"), &self.mean)?;
        save_tensor(dir.join("std.tnsr"), &self.std)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CodecMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        Ok(LatentCodec {
            meta,
            mean: load_tensor(dir.join("mean.tnsr"))?,
            std: load_tensor(dir.join("std.tnsr"))?,
        })
    }
}
