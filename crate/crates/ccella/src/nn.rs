//! Parameter storage, seeded initialization, and small layer helpers.
//!
//! Every parameter is seeded independently from `(base_seed, name)`, so two
//! models that share a submodule's parameter names get bit-identical
//! initializations for that submodule regardless of what else they contain.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensor_core::{load_tensor, save_tensor, Elem, Tape, Tensor};

use crate::error::{Error, Result};

/// FNV-1a, used to fold parameter names into seeds.
pub fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// RNG for one named stream under a base seed.
pub fn derive_rng(base_seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(base_seed ^ hash_name(name)))
}

/// RNG for an indexed stream (per sample, per step, ...).
pub fn derive_rng_indexed(base_seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(
        splitmix(base_seed ^ hash_name(name)).wrapping_add(index),
    ))
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Normal scaled by 1/sqrt(fan_in).
    FanIn(usize),
}

/// Named table of plain parameter tensors; the single source of truth for a
/// model's weights.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter, drawing its initial value from a stream seeded
    /// by `(base_seed, name)`.
    pub fn register(&mut self, base_seed: u64, name: &str, shape: &[usize], init: Init) {
        assert!(
            !self.params.contains_key(name),
            "parameter {name} registered twice"
        );
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal(sd) => {
                let mut rng = derive_rng(base_seed, name);
                Tensor::randn(shape, &mut rng).scale(sd as Elem)
            }
            Init::FanIn(fan_in) => {
                let mut rng = derive_rng(base_seed, name);
                let sd = 1.0 / (fan_in as f64).sqrt();
                Tensor::randn(shape, &mut rng).scale(sd as Elem)
            }
        };
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        assert_eq!(slot.shape(), value.shape(), "shape change for {name}");
        *slot = value;
        Ok(())
    }

    /// Overwrite every parameter matching `prefix` with zeros.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count, optionally restricted to a name prefix.
    pub fn num_elements(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Attach every parameter to `tape` as a differentiable leaf.
    pub fn tracked(&self, tape: &Tape) -> LiveParams {
        LiveParams {
            map: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.var(v)))
                .collect(),
        }
    }

    /// Plain view for inference paths; no tape participation.
    pub fn frozen(&self) -> LiveParams {
        LiveParams {
            map: self.params.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut index = String::new();
        for (name, t) in &self.params {
            save_tensor(dir.join(format!("{name}.tnsr")), t)?;
            index.push_str(name);
            index.push('\n');
        }
        fs::write(dir.join("index.txt"), index)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index = fs::read_to_string(dir.join("index.txt"))?;
        let mut params = BTreeMap::new();
        for name in index.lines().filter(|l| !l.is_empty()) {
            let t = load_tensor(dir.join(format!("{name}.tnsr")))?;
            params.insert(name.to_string(), t);
        }
        Ok(ParamStore { params })
    }
}

/// Parameters bound for one forward pass: tape leaves during training,
/// plain tensors during inference.
pub struct LiveParams {
    map: BTreeMap<String, Tensor>,
}

impl LiveParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Gradients populated by a completed backward pass.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.map
            .iter()
            .filter_map(|(k, v)| v.grad().map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Affine layer `x @ w + b` acting on the last axis.
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = format!("{name}.w");
        store.register(seed, &w, &[in_dim, out_dim], Init::FanIn(in_dim));
        let b = if bias {
            let b = format!("{name}.b");
            store.register(seed, &b, &[out_dim], Init::Zeros);
            Some(b)
        } else {
            None
        };
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// Apply to `[..., in_dim]`, preserving leading shape.
    pub fn forward(&self, p: &LiveParams, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        let rows = x.len() / self.in_dim;
        let flat = x.reshape(&[rows, self.in_dim])?;
        let mut y = flat.matmul(p.get(&self.w)?)?;
        if let Some(b) = &self.b {
            y = y.add(p.get(b)?)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(&out_shape)?)
    }
}

/// Layer norm over the last axis with learnable gain/bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let last = x.rank() - 1;
    let mean = x.mean_axis(last, true)?;
    let centered = x.sub(&mean)?;
    let var = centered.pow_scalar(2.0).mean_axis(last, true)?;
    let normed = centered.div(&var.add_scalar(eps as Elem).sqrt())?;
    Ok(normed.mul(gain)?.add(bias)?)
}

/// Instance norm over the spatial axes of `[B,C,H,W]`, with per-channel
/// gain/bias shaped `[C,1,1]`.
pub fn instance_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let [b, c, h, w] = [
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    ];
    let flat = x.reshape(&[b, c, h * w])?;
    let mean = flat.mean_axis(2, true)?;
    let centered = flat.sub(&mean)?;
    let var = centered.pow_scalar(2.0).mean_axis(2, true)?;
    let normed = centered.div(&var.add_scalar(eps as Elem).sqrt())?;
    let back = normed.reshape(&[b, c, h, w])?;
    Ok(back.mul(gain)?.add(bias)?)
}
