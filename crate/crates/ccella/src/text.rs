//! Frozen text encoder: seeded embedding table, sinusoidal positions, one
//! self-attention layer. Stands in for a large pretrained language model;
//! its parameters never join a gradient tape.

use tensor_core::{scaled_dot_attention, Elem, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore};
use crate::report::{MAX_REPORT_LEN, VOCAB_SIZE};

pub const D_TEXT: usize = 64;

/// Seed for the shared frozen encoder; every model in a run sees the same
/// encoder, like a pretrained checkpoint would be.
pub const TEXT_ENCODER_SEED: u64 = 0x7e57_c0de;

#[derive(Debug, Clone)]
pub struct TextEmbedding {
    /// `[MAX_REPORT_LEN, D_TEXT]`; all-zero rows where masked.
    pub tokens: Tensor,
    /// `[MAX_REPORT_LEN]` of 0/1; all zeros for an absent report.
    pub mask: Tensor,
}

impl TextEmbedding {
    pub fn has_text(&self) -> bool {
        self.mask.data().iter().any(|&m| m != 0.0)
    }
}

pub struct TextEncoder {
    params: ParamStore,
    positions: Tensor,
}

impl Default for TextEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl TextEncoder {
    pub fn new() -> Self {
        let mut params = ParamStore::new();
        let seed = TEXT_ENCODER_SEED;
        let d = D_TEXT;
        params.register(seed, "text.embed", &[VOCAB_SIZE, d], Init::Normal(0.5));
        for name in ["text.wq", "text.wk", "text.wv", "text.wo"] {
            params.register(seed, name, &[d, d], Init::FanIn(d));
        }

        let mut pos = vec![0.0 as Elem; MAX_REPORT_LEN * d];
        for p in 0..MAX_REPORT_LEN {
            for i in 0..d / 2 {
                let freq = (10_000.0f64).powf(-2.0 * i as f64 / d as f64);
                let angle = p as f64 * freq;
                pos[p * d + 2 * i] = angle.sin() as Elem;
                pos[p * d + 2 * i + 1] = angle.cos() as Elem;
            }
        }
        let positions = Tensor::new(&[MAX_REPORT_LEN, d], pos).unwrap();
        TextEncoder { params, positions }
    }

    /// Encode a report; `None` is the empty-string proxy (zero tokens, zero
    /// mask), which downstream attention treats as "no text".
    pub fn encode(&self, report: Option<&[u16]>) -> Result<TextEmbedding> {
        let d = D_TEXT;
        let tokens = match report {
            None => {
                return Ok(TextEmbedding {
                    tokens: Tensor::zeros(&[MAX_REPORT_LEN, d]),
                    mask: Tensor::zeros(&[MAX_REPORT_LEN]),
                })
            }
            Some(t) => t,
        };
        for &id in tokens {
            if id as usize >= VOCAB_SIZE {
                return Err(Error::TokenOutOfVocab {
                    id,
                    size: VOCAB_SIZE,
                });
            }
        }
        let n = tokens.len().min(MAX_REPORT_LEN);
        let table = self.params.get("text.embed")?;
        let mut emb = vec![0.0 as Elem; MAX_REPORT_LEN * d];
        for (p, &id) in tokens.iter().take(n).enumerate() {
            let row = &table.data()[id as usize * d..(id as usize + 1) * d];
            emb[p * d..(p + 1) * d].copy_from_slice(row);
        }
        let mut mask = vec![0.0 as Elem; MAX_REPORT_LEN];
        for m in mask.iter_mut().take(n) {
            *m = 1.0;
        }
        let mask = Tensor::new(&[MAX_REPORT_LEN], mask)?;

        let x = Tensor::new(&[MAX_REPORT_LEN, d], emb)?.add(&self.positions)?;
        let q = x.matmul(self.params.get("text.wq")?)?;
        let k = x.matmul(self.params.get("text.wk")?)?;
        let v = x.matmul(self.params.get("text.wv")?)?;
        let attn = scaled_dot_attention(&q, &k, &v, Some(&mask))?;
        let out = x.add(&attn.matmul(self.params.get("text.wo")?)?)?;
        // zero padded rows so the embedding is a pure function of the tokens
        let mask_col = mask.reshape(&[MAX_REPORT_LEN, 1])?;
        let tokens = out.mul(&mask_col)?;
        Ok(TextEmbedding { tokens, mask })
    }
}
