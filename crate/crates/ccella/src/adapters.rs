//! Conditioning adapters: timestep-aware text-adapter blocks, the
//! class-conditioned variant with per-block classifier heads, the
//! dual-head stack that feeds both cross-attention and the timestep
//! embedding, and the baseline conditioning modes it is compared against.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tensor_core::{concat, scaled_dot_attention, Elem, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, LiveParams, ParamStore};
use crate::phantom::SPACING_NORM;
use crate::report::{first_sentence, SHORT_CONTEXT_LEN, TOK_CLASS_NEG, TOK_CLASS_POS};
use crate::text::TextEmbedding;

/// Conditioning mode: baselines, ablations, the dual-head model, and its
/// variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Maisi,
    RadMaisi,
    EllaMaisi,
    PathLdm,
    Decoupled,
    L1Only,
    Ccella,
    Shared,
    First,
    Last,
}

impl Mode {
    pub const ALL: [Mode; 10] = [
        Mode::Maisi,
        Mode::RadMaisi,
        Mode::EllaMaisi,
        Mode::PathLdm,
        Mode::Decoupled,
        Mode::L1Only,
        Mode::Ccella,
        Mode::Shared,
        Mode::First,
        Mode::Last,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Maisi => "MAISI",
            Mode::RadMaisi => "RADMAISI",
            Mode::EllaMaisi => "ELLAMAISI",
            Mode::PathLdm => "PATHLDM",
            Mode::Decoupled => "DECOUPLED",
            Mode::L1Only => "L1ONLY",
            Mode::Ccella => "CCELLA",
            Mode::Shared => "SHARED",
            Mode::First => "FIRST",
            Mode::Last => "LAST",
        }
    }

    /// Modes that run a text-adapter stack.
    pub fn uses_adapter(&self) -> bool {
        !matches!(self, Mode::Maisi | Mode::RadMaisi | Mode::PathLdm)
    }

    /// Modes whose adapter carries classifier heads (and so can emit a
    /// synthetic label).
    pub fn has_class_head(&self) -> bool {
        matches!(
            self,
            Mode::L1Only | Mode::Ccella | Mode::Shared | Mode::First | Mode::Last
        )
    }

    /// Class-loss weight is forced to zero globally in L1-only training.
    pub fn l1_only(&self) -> bool {
        matches!(self, Mode::L1Only)
    }

    /// Modes that need the ground-truth label at conditioning time.
    pub fn needs_label(&self) -> bool {
        matches!(self, Mode::RadMaisi | Mode::Decoupled | Mode::PathLdm)
    }

    /// Whether the U-Net receives a cross-attention context.
    pub fn has_cross_attention(&self) -> bool {
        !matches!(self, Mode::Maisi | Mode::RadMaisi)
    }

    /// Width of the vector concatenated to the timestep embedding
    /// (class component + normalized spacing).
    pub fn timestep_extra_width(&self) -> usize {
        match self {
            Mode::Maisi | Mode::EllaMaisi | Mode::PathLdm => 2,
            Mode::RadMaisi | Mode::Decoupled => 4,
            Mode::L1Only | Mode::Ccella | Mode::Shared | Mode::First | Mode::Last => 4,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .iter()
            .copied()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown mode {s}")))
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Mode::from_str(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdapterConfig {
    pub blocks: usize,
    /// Learnable latent queries per block (context length of h_T).
    pub queries: usize,
    pub d_cond: usize,
    pub d_text: usize,
    pub t_sin_dim: usize,
    pub head_hidden: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            blocks: 6,
            queries: 8,
            d_cond: 64,
            d_text: 64,
            t_sin_dim: 64,
            head_hidden: 256,
        }
    }
}

/// The adapter's two heads: aligned text context for cross-attention and
/// class logits for timestep conditioning.
pub struct AdapterOutput {
    /// `[queries, d_cond]`, output of the final block.
    pub text_context: Tensor,
    /// `[2]`, present for class-headed stacks.
    pub class_logits: Option<Tensor>,
    /// `[heads, 2]`, the inputs to the final affine.
    pub per_block_logits: Option<Tensor>,
}

/// Everything the U-Net consumes besides the noisy latent.
pub struct ConditioningBundle {
    pub mode: Mode,
    /// `[Lc, d_cond]` cross-attention context.
    pub context: Option<Tensor>,
    /// `[Lc]` 0/1 mask for the context (None = all valid).
    pub context_mask: Option<Tensor>,
    /// `[k]` concatenated to the sinusoidal timestep embedding.
    pub timestep_extra: Tensor,
}

/// Batched adapter outputs for a batch whose samples may differ in text,
/// mask, and timestep.
pub struct BatchedAdapterOutput {
    /// `[B, queries, d_cond]`.
    pub text_context: Tensor,
    /// `[B, 2]` when the stack has classifier heads.
    pub class_logits: Option<Tensor>,
    /// `[B, heads, 2]`.
    pub per_block_logits: Option<Tensor>,
}

/// Which blocks carry classifier heads, and whether head weights are
/// shared.
#[derive(Debug, Clone, Copy, PartialEq)]
enum HeadLayout {
    None,
    All,
    SharedAll,
    FirstOnly,
    LastOnly,
}

impl HeadLayout {
    fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::EllaMaisi | Mode::Decoupled => HeadLayout::None,
            Mode::Ccella | Mode::L1Only => HeadLayout::All,
            Mode::Shared => HeadLayout::SharedAll,
            Mode::First => HeadLayout::FirstOnly,
            Mode::Last => HeadLayout::LastOnly,
            Mode::Maisi | Mode::RadMaisi | Mode::PathLdm => {
                unreachable!("mode {mode} has no adapter stack")
            }
        }
    }

    fn head_param_name(&self, block: usize) -> Option<String> {
        match self {
            HeadLayout::None => None,
            HeadLayout::All => Some(format!("adapter.b{block}.head")),
            HeadLayout::SharedAll => Some("adapter.sharedhead".to_string()),
            HeadLayout::FirstOnly => (block == 0).then(|| "adapter.b0.head".to_string()),
            HeadLayout::LastOnly => None, // resolved against the last block index at call sites
        }
    }
}

struct Head {
    fc1: Linear,
    fc2: Linear,
}

struct Block {
    wq: String,
    wk: String,
    wv: String,
    wo: String,
    ada: Linear,
    head: Option<usize>, // index into AdapterStack::heads
}

/// Chain of timestep-aware adapter blocks with optional classifier heads
/// and a final class-fusion affine.
pub struct AdapterStack {
    pub cfg: AdapterConfig,
    pub mode: Mode,
    blocks: Vec<Block>,
    heads: Vec<Head>,
    final_fc: Option<Linear>,
    queries: String,
}

impl AdapterStack {
    pub fn new(store: &mut ParamStore, seed: u64, cfg: AdapterConfig, mode: Mode) -> Self {
        assert!(mode.uses_adapter(), "mode {mode} has no adapter stack");
        let layout = HeadLayout::for_mode(mode);
        let d = cfg.d_cond;

        let queries = "adapter.queries".to_string();
        store.register(seed, &queries, &[cfg.queries, d], Init::Normal(0.5));

        let mut heads: Vec<Head> = Vec::new();
        let mut head_names: Vec<String> = Vec::new();
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let prefix = format!("adapter.b{b}");
            let wq = format!("{prefix}.wq");
            let wk = format!("{prefix}.wk");
            let wv = format!("{prefix}.wv");
            let wo = format!("{prefix}.wo");
            store.register(seed, &wq, &[d, d], Init::FanIn(d));
            store.register(seed, &wk, &[cfg.d_text, d], Init::FanIn(cfg.d_text));
            store.register(seed, &wv, &[cfg.d_text, d], Init::FanIn(cfg.d_text));
            store.register(seed, &wo, &[d, d], Init::FanIn(d));
            let ada = Linear::new(
                store,
                seed,
                &format!("{prefix}.ada"),
                cfg.t_sin_dim,
                2 * d,
                true,
            );

            let head_name = match layout {
                HeadLayout::LastOnly if b + 1 == cfg.blocks => {
                    Some(format!("adapter.b{b}.head"))
                }
                HeadLayout::LastOnly => None,
                _ => layout.head_param_name(b),
            };
            let head = head_name.map(|name| {
                if let Some(pos) = head_names.iter().position(|n| *n == name) {
                    pos // shared head: reuse registered parameters
                } else {
                    let fc1 = Linear::new(store, seed, &format!("{name}.fc1"), d, cfg.head_hidden, true);
                    let fc2 = Linear::new(store, seed, &format!("{name}.fc2"), cfg.head_hidden, 2, true);
                    heads.push(Head { fc1, fc2 });
                    head_names.push(name);
                    heads.len() - 1
                }
            });
            blocks.push(Block {
                wq,
                wk,
                wv,
                wo,
                ada,
                head,
            });
        }

        let n_head_slots = blocks.iter().filter(|b| b.head.is_some()).count();
        let final_fc = (n_head_slots > 0).then(|| {
            Linear::new(store, seed, "adapter.final", n_head_slots * 2, 2, true)
        });

        AdapterStack {
            cfg,
            mode,
            blocks,
            heads,
            final_fc,
            queries,
        }
    }

    /// Number of blocks that emit per-block logits.
    pub fn head_slots(&self) -> usize {
        self.blocks.iter().filter(|b| b.head.is_some()).count()
    }

    /// One block over a batch: latent queries cross-attend to the text
    /// tokens; the per-sample timestep modulates via adaptive scale/shift;
    /// residual connection. With a fully masked (absent) text, attention
    /// contributes zeros and the output is the timestep-modulated residual
    /// path alone.
    fn block_forward(
        &self,
        p: &LiveParams,
        block: &Block,
        q_in: &Tensor,   // [B, Lq, d]
        tokens: &Tensor, // [B, L, d_text]
        mask: &Tensor,   // [B, L]
        t_sin: &Tensor,  // [B, t_sin_dim]
    ) -> Result<(Tensor, Option<Tensor>)> {
        let d = self.cfg.d_cond;
        let b = q_in.shape()[0];
        let ada = block.ada.forward(p, t_sin)?; // [B, 2d]
        let scale = ada.slice_axis(1, 0, d)?.reshape(&[b, 1, d])?;
        let shift = ada.slice_axis(1, d, 2 * d)?.reshape(&[b, 1, d])?;

        let aq = proj3(q_in, p.get(&block.wq)?)?;
        let k = proj3(tokens, p.get(&block.wk)?)?;
        let v = proj3(tokens, p.get(&block.wv)?)?;
        let attn = scaled_dot_attention(&aq, &k, &v, Some(mask))?;
        let m = proj3(&attn, p.get(&block.wo)?)?;
        let modulated = scale.add_scalar(1.0).mul(&m)?.add(&shift)?;
        let out = q_in.add(&modulated)?;

        let logits = match block.head {
            None => None,
            Some(h) => {
                let head = &self.heads[h];
                let pooled = out.mean_axis(1, false)?; // [B, d]
                let hidden = head.fc1.forward(p, &pooled)?.silu();
                Some(head.fc2.forward(p, &hidden)?) // [B, 2]
            }
        };
        Ok((out, logits))
    }

    /// Run the full stack over a batch: chained block outputs give the
    /// aligned text context; per-block logits concatenate into the final
    /// class prediction.
    pub fn forward_batch(
        &self,
        p: &LiveParams,
        tokens: &Tensor, // [B, L, d_text]
        mask: &Tensor,   // [B, L]
        t_sin: &Tensor,  // [B, t_sin_dim]
    ) -> Result<BatchedAdapterOutput> {
        let b = tokens.shape()[0];
        let (lq, d) = (self.cfg.queries, self.cfg.d_cond);
        let q0 = p.get(&self.queries)?.reshape(&[1, lq, d])?;
        // broadcast the shared initial queries across the batch
        let mut q = Tensor::ones(&[b, 1, 1]).mul(&q0)?;
        let mut logits = Vec::new();
        for block in &self.blocks {
            let (q_next, l) = self.block_forward(p, block, &q, tokens, mask, t_sin)?;
            q = q_next;
            if let Some(l) = l {
                logits.push(l);
            }
        }
        let (class_logits, per_block) = match &self.final_fc {
            None => (None, None),
            Some(fc) => {
                let refs: Vec<&Tensor> = logits.iter().collect();
                let flat = concat(1, &refs)?; // [B, heads*2]
                let fused = fc.forward(p, &flat)?; // [B, 2]
                let per = flat.reshape(&[b, logits.len(), 2])?;
                (Some(fused), Some(per))
            }
        };
        Ok(BatchedAdapterOutput {
            text_context: q,
            class_logits,
            per_block_logits: per_block,
        })
    }

    /// Single-sample convenience over [`AdapterStack::forward_batch`].
    pub fn forward(
        &self,
        p: &LiveParams,
        text: &TextEmbedding,
        t_sin: &Tensor, // [1, t_sin_dim]
    ) -> Result<AdapterOutput> {
        let (l, dt) = (text.tokens.shape()[0], text.tokens.shape()[1]);
        let tokens = text.tokens.reshape(&[1, l, dt])?;
        let mask = text.mask.reshape(&[1, l])?;
        let out = self.forward_batch(p, &tokens, &mask, t_sin)?;
        let (lq, d) = (self.cfg.queries, self.cfg.d_cond);
        Ok(AdapterOutput {
            text_context: out.text_context.reshape(&[lq, d])?,
            class_logits: match out.class_logits {
                None => None,
                Some(c) => Some(c.reshape(&[2])?),
            },
            per_block_logits: match out.per_block_logits {
                None => None,
                Some(pb) => {
                    let heads = pb.shape()[1];
                    Some(pb.reshape(&[heads, 2])?)
                }
            },
        })
    }
}

/// Apply `[in, out]` weights to the last axis of `[B, L, in]`.
fn proj3(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let e = w.shape()[1];
    Ok(x.reshape(&[b * l, d])?.matmul(w)?.reshape(&[b, l, e])?)
}

/// Prompt for the short-context baseline: class keyword first, then the
/// report's first sentence, hard-truncated to the short context length.
pub fn pathldm_prompt(label: bool, report: Option<&[u16]>) -> Vec<u16> {
    let mut toks = vec![if label { TOK_CLASS_POS } else { TOK_CLASS_NEG }];
    if let Some(r) = report {
        toks.extend_from_slice(first_sentence(r));
    }
    toks.truncate(SHORT_CONTEXT_LEN);
    toks
}

/// Normalized spacing vector for timestep conditioning.
pub fn spacing_vector(spacing: &[f64; 2]) -> Tensor {
    Tensor::from_vec(vec![
        (spacing[0] / SPACING_NORM) as Elem,
        (spacing[1] / SPACING_NORM) as Elem,
    ])
}

fn one_hot(label: bool) -> Tensor {
    let mut v = vec![0.0; 2];
    v[label as usize] = 1.0;
    Tensor::from_vec(v)
}

/// Assemble the vector concatenated to the timestep embedding for a mode:
/// softmax class probabilities (dual-head family), a ground-truth one-hot
/// (label-conditioned baselines), or nothing but normalized spacing.
pub fn timestep_extra(
    mode: Mode,
    class_probs: Option<&Tensor>,
    label: Option<bool>,
    spacing: &[f64; 2],
) -> Result<Tensor> {
    let sp = spacing_vector(spacing);
    match mode {
        Mode::Maisi | Mode::EllaMaisi | Mode::PathLdm => Ok(sp),
        Mode::RadMaisi | Mode::Decoupled => {
            let l = label.ok_or(Error::MissingConditioning {
                mode: mode.as_str().to_string(),
                what: "ground-truth label",
            })?;
            Ok(concat(0, &[&one_hot(l), &sp])?)
        }
        Mode::L1Only | Mode::Ccella | Mode::Shared | Mode::First | Mode::Last => {
            let probs = class_probs.ok_or(Error::MissingConditioning {
                mode: mode.as_str().to_string(),
                what: "class probabilities from the adapter",
            })?;
            Ok(concat(0, &[probs, &sp])?)
        }
    }
}
