//! Deterministic training loop with per-step loss records, missing-text
//! gating, periodic checkpoints, and bit-exact resume.
//!
//! All per-step randomness (batch order, timesteps, noise draws) is a pure
//! function of `(seed, step)`, so resuming from a checkpoint replays the
//! exact run an uninterrupted training would have produced.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tensor_core::{stack, Tape, Tensor};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{joint_loss, ClassTerm, LossTerms, DEFAULT_FOCAL_GAMMA, DEFAULT_LAMBDA};
use crate::model::{CondSource, GeneratorModel};
use crate::nn::derive_rng_indexed;
use crate::optim::{poly_lr, AdamW, AdamWConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub adamw: AdamWConfig,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
    /// Halt after this step while keeping the full schedule horizon
    /// (staged runs resume later with `resume`).
    pub stop_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 16,
            lr0: 1e-4,
            adamw: AdamWConfig::default(),
            lambda: DEFAULT_LAMBDA,
            gamma: DEFAULT_FOCAL_GAMMA,
            seed: 7,
            checkpoint_every: None,
            stop_after: None,
        }
    }
}

/// One line of the training ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_noise: f64,
    pub l_class: Option<f64>,
    pub lambda_eff: f64,
    pub total: f64,
}

impl StepRecord {
    fn from_terms(step: usize, lr: f64, terms: &LossTerms) -> Self {
        StepRecord {
            step,
            lr,
            l_noise: terms.l_noise,
            l_class: terms.l_class,
            lambda_eff: terms.lambda_eff,
            total: terms.total,
        }
    }
}

pub struct TrainOutput {
    pub records: Vec<StepRecord>,
    pub final_step: usize,
}

struct TrainItem {
    latent: Tensor,
    source: CondSource,
    label: bool,
}

fn load_train_items(model: &GeneratorModel, dataset: &Dataset) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for idx in dataset.indices(Split::Train) {
        let s = dataset.load_sample(idx)?;
        let latent = model.codec.encode(&s.image)?;
        let source = model.cond_source(s.report.as_deref(), Some(s.label), s.spacing)?;
        items.push(TrainItem {
            latent,
            source,
            label: s.label,
        });
    }
    if items.is_empty() {
        return Err(Error::Config("no training samples in dataset".to_string()));
    }
    Ok(items)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng_indexed(seed, "epoch", epoch as u64));
    order
}

fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = fs::read_dir(dir.join("checkpoints")).ok()?;
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().to_string();
        if let Some(step) = name
            .strip_prefix("step_")
            .and_then(|s| s.parse::<usize>().ok())
        {
            if best.as_ref().map_or(true, |(b, _)| step > *b) {
                best = Some((step, e.path()));
            }
        }
    }
    best
}

/// Train `model` on the dataset's train split. With `out_dir` set, writes
/// a JSONL ledger (one record per step) and periodic checkpoints; with
/// `resume` it continues from the latest checkpoint under `out_dir`.
pub fn train(
    model: &mut GeneratorModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<TrainOutput> {
    let items = load_train_items(model, dataset)?;
    let n = items.len();
    let latent_shape = model.codec.latent_shape();

    let mut opt = AdamW::new(cfg.adamw);
    let mut start_step = 0usize;
    if resume {
        if let Some(dir) = out_dir {
            if let Some((step, ckpt)) = latest_checkpoint(dir) {
                let (loaded, _) = GeneratorModel::load_checkpoint(&ckpt)?;
                model.store = loaded.store;
                opt = AdamW::load(&ckpt.join("opt"))?;
                start_step = step;
            }
        }
    }

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("train_log.jsonl"))?,
            )
        }
        None => None,
    };

    let end_step = cfg.stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    let mut records = Vec::with_capacity(end_step.saturating_sub(start_step));
    let mut current_epoch = usize::MAX;
    let mut order: Vec<usize> = Vec::new();

    for step in start_step..end_step {
        // deterministic batch composition from the epoch streams
        let mut batch: Vec<&TrainItem> = Vec::with_capacity(cfg.batch_size);
        for j in 0..cfg.batch_size {
            let g = step * cfg.batch_size + j;
            let (e, pos) = (g / n, g % n);
            if e != current_epoch {
                order = epoch_order(cfg.seed, e, n);
                current_epoch = e;
            }
            batch.push(&items[order[pos]]);
        }

        // per-step noise/timestep stream
        let mut rng = derive_rng_indexed(cfg.seed, "step", step as u64);
        let mut ts = Vec::with_capacity(cfg.batch_size);
        let mut zt_rows = Vec::with_capacity(cfg.batch_size);
        let mut eps_rows = Vec::with_capacity(cfg.batch_size);
        for item in &batch {
            let t = model.schedule.sample_timestep(&mut rng);
            let eps = Tensor::randn(&latent_shape, &mut rng);
            let z_t = model.schedule.forward_noise(&item.latent, t, &eps)?;
            ts.push(t);
            zt_rows.push(z_t);
            eps_rows.push(eps);
        }
        let zt_refs: Vec<&Tensor> = zt_rows.iter().collect();
        let eps_refs: Vec<&Tensor> = eps_rows.iter().collect();
        let z_t = stack(&zt_refs)?;
        let eps = stack(&eps_refs)?;

        // forward + backward on a fresh tape
        let tape = Tape::new();
        let live = model.store.tracked(&tape);
        let sources: Vec<&CondSource> = batch.iter().map(|i| &i.source).collect();
        let cond = model.condition_batch(&live, &sources, &ts)?;
        let eps_hat = model.predict_eps(&live, &z_t, &cond)?;

        let mut class_terms = Vec::new();
        if let Some(logits) = &cond.class_logits {
            for (i, item) in batch.iter().enumerate() {
                class_terms.push(ClassTerm {
                    logits: logits.slice_axis(0, i, i + 1)?.reshape(&[2])?,
                    label: item.label,
                    text_present: item.source.text_present,
                });
            }
        }
        let joint = joint_loss(
            &eps_hat,
            &eps,
            &class_terms,
            cfg.lambda,
            cfg.gamma,
            model.cfg.mode.l1_only(),
        )?;
        if !joint.terms.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        joint.total.backward()?;

        let lr = poly_lr(step, cfg.steps, cfg.lr0)?;
        let grads = live.grads();
        opt.step(&mut model.store, &grads, lr)?;

        let record = StepRecord::from_terms(step, lr, &joint.terms);
        if let Some(f) = &mut log {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        records.push(record);

        let done = step + 1 == end_step;
        let at_interval = cfg
            .checkpoint_every
            .map_or(false, |every| (step + 1) % every == 0);
        if let Some(dir) = out_dir {
            if done || at_interval {
                let ckpt = dir.join(format!("checkpoints/step_{:06}", step + 1));
                model.save_checkpoint(&ckpt, step + 1)?;
                opt.save(&ckpt.join("opt"))?;
            }
        }
    }

    Ok(TrainOutput {
        records,
        final_step: end_step,
    })
}
