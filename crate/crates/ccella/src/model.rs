//! The full generator: frozen codec and text encoder around a trainable
//! conditioning stack and U-Net, with batched ε prediction, ancestral
//! generation, and checkpointing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensor_core::{concat, stack, Tensor};

use crate::adapters::{
    pathldm_prompt, timestep_extra, AdapterConfig, AdapterStack, BatchedAdapterOutput, Mode,
};
use crate::codec::{LatentCodec, DEFAULT_PATCH};
use crate::diffusion::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::nn::{derive_rng_indexed, LiveParams, ParamStore};
use crate::phantom::PhantomConfig;
use crate::text::{TextEmbedding, TextEncoder};
use crate::unet::{timestep_sinusoid, UNet, UNetConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Base seed for parameter initialization (per-name streams).
    pub init_seed: u64,
    pub adapter: AdapterConfig,
    pub unet_widths: [usize; 2],
    pub patch: usize,
    pub codec_seed: u64,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// When a sample has no text, λ-gating removes its class-loss term;
    /// with this flag the noise loss additionally stops propagating
    /// through the class head for that sample (default: keep propagating).
    pub stop_class_grads_when_untexted: bool,
}

impl ModelConfig {
    pub fn new(mode: Mode, init_seed: u64) -> Self {
        ModelConfig {
            mode,
            init_seed,
            adapter: AdapterConfig::default(),
            unet_widths: [32, 64],
            patch: DEFAULT_PATCH,
            codec_seed: 0xc0dec,
            schedule_steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            stop_class_grads_when_untexted: false,
        }
    }
}

/// Per-sample conditioning sources, fixed for a whole trajectory.
#[derive(Debug, Clone)]
pub struct CondSource {
    pub text: TextEmbedding,
    /// Whether the original sample carried a report (drives λ-gating).
    pub text_present: bool,
    pub label: Option<bool>,
    pub spacing: [f64; 2],
}

/// What one batched conditioning pass produced.
pub struct BatchConditioning {
    /// `[B, Lc, d]` cross-attention context, mode-dependent.
    pub context: Option<Tensor>,
    pub context_mask: Option<Tensor>,
    /// `[B, t_dim]` fused timestep embedding.
    pub t_emb: Tensor,
    /// `[B, 2]` adapter class logits (dual-head family only).
    pub class_logits: Option<Tensor>,
}

pub struct GeneratorModel {
    pub cfg: ModelConfig,
    pub phantom: PhantomConfig,
    pub store: ParamStore,
    pub codec: LatentCodec,
    pub text_encoder: TextEncoder,
    pub adapter: Option<AdapterStack>,
    pub unet: UNet,
    pub schedule: NoiseSchedule,
}

impl GeneratorModel {
    pub fn build(cfg: ModelConfig, phantom: PhantomConfig) -> Result<Self> {
        let codec = LatentCodec::calibrate(&phantom, cfg.patch, cfg.codec_seed)?;
        let mut store = ParamStore::new();
        let adapter = cfg
            .mode
            .uses_adapter()
            .then(|| AdapterStack::new(&mut store, cfg.init_seed, cfg.adapter, cfg.mode));
        let context_dim = cfg.mode.has_cross_attention().then_some(cfg.adapter.d_cond);
        let mut unet_cfg = UNetConfig::new(
            codec.latent_channels(),
            cfg.mode.timestep_extra_width(),
            context_dim,
        );
        unet_cfg.widths = cfg.unet_widths;
        unet_cfg.t_sin_dim = cfg.adapter.t_sin_dim;
        let unet = UNet::new(&mut store, cfg.init_seed, unet_cfg);
        let schedule = NoiseSchedule::linear(cfg.schedule_steps, cfg.beta_start, cfg.beta_end)?;
        Ok(GeneratorModel {
            cfg,
            phantom,
            store,
            codec,
            text_encoder: TextEncoder::new(),
            adapter,
            unet,
            schedule,
        })
    }

    /// Encode one sample's conditioning sources. For the short-context
    /// baseline the prompt is the class keyword plus the truncated first
    /// sentence; every other mode sees the full report (or the empty
    /// proxy).
    pub fn cond_source(
        &self,
        report: Option<&[u16]>,
        label: Option<bool>,
        spacing: [f64; 2],
    ) -> Result<CondSource> {
        let text = match self.cfg.mode {
            Mode::PathLdm => {
                let l = label.ok_or(Error::MissingConditioning {
                    mode: self.cfg.mode.as_str().to_string(),
                    what: "ground-truth label",
                })?;
                self.text_encoder.encode(Some(&pathldm_prompt(l, report)))?
            }
            _ => self.text_encoder.encode(report)?,
        };
        Ok(CondSource {
            text,
            text_present: report.is_some(),
            label,
            spacing,
        })
    }

    fn stack_text(&self, sources: &[&CondSource]) -> Result<(Tensor, Tensor)> {
        let tokens: Vec<&Tensor> = sources.iter().map(|s| &s.text.tokens).collect();
        let masks: Vec<&Tensor> = sources.iter().map(|s| &s.text.mask).collect();
        Ok((stack(&tokens)?, stack(&masks)?))
    }

    /// Run the conditioning path for a batch at per-sample timesteps.
    pub fn condition_batch(
        &self,
        p: &LiveParams,
        sources: &[&CondSource],
        ts: &[usize],
    ) -> Result<BatchConditioning> {
        let b = sources.len();
        assert_eq!(b, ts.len(), "one timestep per sample");
        for &t in ts {
            if t >= self.schedule.steps() {
                return Err(Error::TimestepOutOfRange {
                    t,
                    steps: self.schedule.steps(),
                });
            }
        }
        let sin_rows: Vec<Tensor> = ts
            .iter()
            .map(|&t| timestep_sinusoid(t, self.unet.cfg.t_sin_dim))
            .collect();
        let sin_refs: Vec<&Tensor> = sin_rows.iter().collect();
        let t_sin = stack(&sin_refs)?.reshape(&[b, self.unet.cfg.t_sin_dim])?;

        let mode = self.cfg.mode;
        let mut adapter_out: Option<BatchedAdapterOutput> = None;
        if let Some(adapter) = &self.adapter {
            let (tokens, mask) = self.stack_text(sources)?;
            adapter_out = Some(adapter.forward_batch(p, &tokens, &mask, &t_sin)?);
        }

        // per-sample timestep extras (class probabilities / one-hot / spacing)
        let mut extra_rows = Vec::with_capacity(b);
        for (i, src) in sources.iter().enumerate() {
            let probs_row = match adapter_out.as_ref().and_then(|a| a.class_logits.as_ref()) {
                Some(logits) => {
                    let row = logits.slice_axis(0, i, i + 1)?.reshape(&[2])?;
                    let row = if self.cfg.stop_class_grads_when_untexted && !src.text_present {
                        row.detach()
                    } else {
                        row
                    };
                    Some(row.softmax_last())
                }
                None => None,
            };
            extra_rows.push(timestep_extra(
                mode,
                probs_row.as_ref(),
                src.label,
                &src.spacing,
            )?);
        }
        let extra_refs: Vec<&Tensor> = extra_rows.iter().collect();
        let extras = stack(&extra_refs)?; // [B, k]

        // fused timestep embedding rows
        let k = mode.timestep_extra_width();
        let joint = concat(1, &[&t_sin, &extras.reshape(&[b, k])?])?;
        let t_emb = self.unet.timestep_embed_batch(p, &joint)?;

        let (context, context_mask) = match mode {
            Mode::Maisi | Mode::RadMaisi => (None, None),
            Mode::PathLdm => {
                let (tokens, mask) = self.stack_text(sources)?;
                (Some(tokens), Some(mask))
            }
            _ => (
                Some(adapter_out.as_ref().unwrap().text_context.clone()),
                None,
            ),
        };
        Ok(BatchConditioning {
            context,
            context_mask,
            t_emb,
            class_logits: adapter_out.and_then(|a| a.class_logits),
        })
    }

    /// ε prediction for a batch of noisy latents.
    pub fn predict_eps(
        &self,
        p: &LiveParams,
        z_t: &Tensor,
        cond: &BatchConditioning,
    ) -> Result<Tensor> {
        let ctx = cond
            .context
            .as_ref()
            .map(|c| (c, cond.context_mask.as_ref()));
        self.unet.forward(p, z_t, &cond.t_emb, ctx)
    }

    /// Deterministic batched ancestral generation. Per-sample noise
    /// streams make the result independent of batch chunking. Returns the
    /// decoded images plus, for dual-head modes, the label the adapter
    /// extracted at the final step.
    pub fn generate(
        &self,
        sources: &[CondSource],
        seed: u64,
        chunk: usize,
    ) -> Result<Vec<GeneratedSample>> {
        let p = self.store.frozen();
        let latent_shape = self.codec.latent_shape();
        let (c, h, w) = (latent_shape[0], latent_shape[1], latent_shape[2]);
        let mut out = Vec::with_capacity(sources.len());
        for (chunk_idx, group) in sources.chunks(chunk.max(1)).enumerate() {
            let b = group.len();
            let mut rngs: Vec<_> = (0..b)
                .map(|i| {
                    derive_rng_indexed(seed, "generate", (chunk_idx * chunk.max(1) + i) as u64)
                })
                .collect();
            let draw = |rngs: &mut Vec<rand_chacha::ChaCha8Rng>| -> Result<Tensor> {
                let rows: Vec<Tensor> = rngs
                    .iter_mut()
                    .map(|r| Tensor::randn(&[c, h, w], r))
                    .collect();
                let refs: Vec<&Tensor> = rows.iter().collect();
                Ok(stack(&refs)?)
            };
            let mut x = draw(&mut rngs)?;
            let refs: Vec<&CondSource> = group.iter().collect();
            let mut final_logits: Option<Tensor> = None;
            for t in (0..self.schedule.steps()).rev() {
                let cond = self.condition_batch(&p, &refs, &vec![t; b])?;
                let eps_hat = self.predict_eps(&p, &x, &cond)?;
                let noise = if t > 0 { Some(draw(&mut rngs)?) } else { None };
                x = self.schedule.ancestral_step(&x, &eps_hat, t, noise.as_ref())?;
                if !x.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "generation latent at timestep {t}"
                    )));
                }
                if t == 0 {
                    final_logits = cond.class_logits;
                }
            }
            for (i, src) in group.iter().enumerate() {
                let latent = x.slice_axis(0, i, i + 1)?.reshape(&[c, h, w])?;
                let image = self.codec.decode_clamped(&latent)?;
                let synthetic_label = final_logits.as_ref().map(|l| {
                    let row = &l.data()[i * 2..(i + 1) * 2];
                    row[1] > row[0]
                });
                out.push(GeneratedSample {
                    image,
                    synthetic_label,
                    text_present: src.text_present,
                });
            }
        }
        Ok(out)
    }

    pub fn save_checkpoint(&self, dir: &Path, step: usize) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = CheckpointMeta {
            mode: self.cfg.mode,
            step,
            config: self.cfg.clone(),
            phantom: self.phantom.clone(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        self.store.save(&dir.join("params"))?;
        self.codec.save(&dir.join("codec"))?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(Self, usize)> {
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        let mut model = GeneratorModel::build(meta.config, meta.phantom)?;
        model.store = ParamStore::load(&dir.join("params"))?;
        model.codec = LatentCodec::load(&dir.join("codec"))?;
        Ok((model, meta.step))
    }
}

pub struct GeneratedSample {
    /// `[S,H,W]` decoded and clamped to [0,1].
    pub image: Tensor,
    /// argmax of the adapter's class head at the final step (dual-head
    /// modes only).
    pub synthetic_label: Option<bool>,
    pub text_present: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    mode: Mode,
    step: usize,
    config: ModelConfig,
    phantom: PhantomConfig,
}
