//! Dataset persistence: a directory with a JSON manifest (per-sample
//! metadata, seeds, split assignment, report tokens) plus one tensor file
//! per image. Reads reproduce the written samples bit-exactly.
//!
//! Layout:
//! ```text
//! <root>/manifest.json
//! <root>/samples/00000.tnsr
//! <root>/samples/00001.tnsr
//! ...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tensor_core::{load_tensor, save_tensor, Tensor};

use crate::error::{Error, Result};
use crate::nn::{derive_rng, derive_rng_indexed};
use crate::phantom::{generate_phantom, LesionDescriptor, PhantomConfig, PhantomSample};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub class_bias: f64,
    /// Fraction of samples whose report is withheld.
    pub missing_text: f64,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub phantom: PhantomConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 512,
            seed: 7,
            class_bias: 0.48,
            missing_text: 0.27,
            train_fraction: 0.8,
            split_seed: 7,
            phantom: PhantomConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub seed: u64,
    pub label: bool,
    pub has_report: bool,
    /// Present exactly when `has_report`.
    pub report: Option<Vec<u16>>,
    pub spacing: [f64; 2],
    pub truth: LesionDescriptor,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub image_shape: Vec<usize>,
    pub positive_fraction: f64,
    pub missing_report_fraction: f64,
    pub samples: Vec<SampleMeta>,
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

/// Generate `config.count` phantoms and persist them under `dir`.
pub fn write_dataset(dir: &Path, config: &DatasetConfig) -> Result<Dataset> {
    assert!(config.count > 0, "dataset must be nonempty");
    fs::create_dir_all(dir.join("samples"))?;

    // split assignment: seeded shuffle, first train_fraction goes to train
    let mut order: Vec<usize> = (0..config.count).collect();
    order.shuffle(&mut derive_rng(config.split_seed, "split"));
    let n_train = ((config.count as f64) * config.train_fraction).round() as usize;
    let mut split = vec![Split::Test; config.count];
    for &i in order.iter().take(n_train) {
        split[i] = Split::Train;
    }

    let mut samples = Vec::with_capacity(config.count);
    let mut positives = 0usize;
    let mut missing = 0usize;
    for i in 0..config.count {
        let sample_seed = derive_rng_indexed(config.seed, "sample", i as u64).gen::<u64>();
        let mut s = generate_phantom(&config.phantom, sample_seed, config.class_bias);
        let withhold = derive_rng_indexed(config.seed, "missing-text", i as u64)
            .gen_bool(config.missing_text);
        if withhold {
            s.report = None;
            missing += 1;
        }
        if s.label {
            positives += 1;
        }
        save_tensor(dir.join(format!("samples/{i:05}.tnsr")), &s.image)?;
        samples.push(SampleMeta {
            index: i,
            seed: sample_seed,
            label: s.label,
            has_report: s.report.is_some(),
            report: s.report,
            spacing: s.spacing,
            truth: s.truth,
            split: split[i],
        });
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        config: config.clone(),
        image_shape: config.phantom.image_shape(),
        positive_fraction: positives as f64 / config.count as f64,
        missing_report_fraction: missing as f64 / config.count as f64,
        samples,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let raw = fs::read(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_slice(&raw)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::DataFormat(format!(
            "dataset manifest version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn load_image(&self, index: usize) -> Result<Tensor> {
        let t = load_tensor(self.root.join(format!("samples/{index:05}.tnsr")))?;
        if t.shape() != self.manifest.image_shape.as_slice() {
            return Err(Error::DataFormat(format!(
                "sample {index} has shape {:?}, manifest says {:?}",
                t.shape(),
                self.manifest.image_shape
            )));
        }
        Ok(t)
    }

    pub fn load_sample(&self, index: usize) -> Result<PhantomSample> {
        let meta = &self.manifest.samples[index];
        Ok(PhantomSample {
            image: self.load_image(index)?,
            report: meta.report.clone(),
            label: meta.label,
            spacing: meta.spacing,
            truth: meta.truth.clone(),
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .filter(|m| m.split == split)
            .map(|m| m.index)
            .collect()
    }

    pub fn phantom_config(&self) -> &PhantomConfig {
        &self.manifest.config.phantom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            count: 100,
            ..DatasetConfig::default()
        };
        let written = write_dataset(dir.path(), &cfg).unwrap();
        let read = read_dataset(dir.path()).unwrap();
        assert_eq!(read.len(), 100);
        for i in 0..100 {
            let a = written.load_sample(i).unwrap();
            let b = read.load_sample(i).unwrap();
            let bits_equal = a
                .image
                .data()
                .iter()
                .zip(b.image.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(bits_equal, "sample {i} image differs");
            assert_eq!(a.report, b.report);
            assert_eq!(a.spacing, b.spacing);
            assert_eq!(a.truth, b.truth);
            assert_eq!(a.label, b.label);
        }
        assert_eq!(
            written.manifest.samples.len(),
            read.manifest.samples.len()
        );
    }

    #[test]
    fn manifest_fractions_match_recount() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            count: 200,
            ..DatasetConfig::default()
        };
        let ds = write_dataset(dir.path(), &cfg).unwrap();
        let pos = ds.manifest.samples.iter().filter(|m| m.label).count();
        let miss = ds
            .manifest
            .samples
            .iter()
            .filter(|m| !m.has_report)
            .count();
        assert_eq!(
            ds.manifest.positive_fraction,
            pos as f64 / 200.0
        );
        assert_eq!(
            ds.manifest.missing_report_fraction,
            miss as f64 / 200.0
        );
        // report presence flag consistent with payload
        for m in &ds.manifest.samples {
            assert_eq!(m.has_report, m.report.is_some());
        }
    }

    #[test]
    fn missing_text_fraction_near_config_over_5000() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            count: 5000,
            missing_text: 0.27,
            ..DatasetConfig::default()
        };
        let ds = write_dataset(dir.path(), &cfg).unwrap();
        let frac = ds.manifest.missing_report_fraction;
        assert!((frac - 0.27).abs() <= 0.01, "missing fraction {frac}");
    }

    #[test]
    fn split_assignment_is_deterministic_and_sized() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            count: 100,
            train_fraction: 0.8,
            ..DatasetConfig::default()
        };
        let ds = write_dataset(dir.path(), &cfg).unwrap();
        assert_eq!(ds.indices(Split::Train).len(), 80);
        assert_eq!(ds.indices(Split::Test).len(), 20);

        let dir2 = tempfile::tempdir().unwrap();
        let ds2 = write_dataset(dir2.path(), &cfg).unwrap();
        assert_eq!(ds.indices(Split::Train), ds2.indices(Split::Train));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            count: 4,
            ..DatasetConfig::default()
        };
        write_dataset(dir.path(), &cfg).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::DataFormat(_))
        ));
    }
}
