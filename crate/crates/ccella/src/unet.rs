//! Compact conditional U-Net predicting ε from the noisy latent, a
//! timestep embedding with concatenated extras, and an optional
//! cross-attention context at the bottleneck.

use serde::{Deserialize, Serialize};
use tensor_core::{concat, scaled_dot_attention, Elem, Tensor};

use crate::error::{Error, Result};
use crate::nn::{instance_norm, layer_norm, Init, Linear, LiveParams, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channel widths for the two levels.
    pub widths: [usize; 2],
    /// Sinusoidal timestep dimension before extras are concatenated.
    pub t_sin_dim: usize,
    /// Projected timestep embedding dimension.
    pub t_dim: usize,
    /// Width of the conditioning vector appended to the sinusoid.
    pub extra_dim: usize,
    /// Cross-attention context dimension; None disables the attention
    /// block entirely (unconditioned and label-only modes).
    pub context_dim: Option<usize>,
}

impl UNetConfig {
    pub fn new(in_channels: usize, extra_dim: usize, context_dim: Option<usize>) -> Self {
        UNetConfig {
            in_channels,
            widths: [32, 64],
            t_sin_dim: 64,
            t_dim: 64,
            extra_dim,
            context_dim,
        }
    }
}

/// Interleaved sinusoidal timestep encoding `[1, dim]`: even slots
/// sin(t·ω_i), odd slots cos(t·ω_i).
pub fn timestep_sinusoid(t: usize, dim: usize) -> Tensor {
    let mut v = vec![0.0 as Elem; dim];
    for i in 0..dim / 2 {
        let freq = (10_000.0f64).powf(-2.0 * i as f64 / dim as f64);
        let angle = t as f64 * freq;
        v[2 * i] = angle.sin() as Elem;
        v[2 * i + 1] = angle.cos() as Elem;
    }
    Tensor::new(&[1, dim], v).expect("shape matches")
}

struct ResBlock {
    n1_g: String,
    n1_b: String,
    conv1: String,
    conv1_b: String,
    t_proj: Linear,
    n2_g: String,
    n2_b: String,
    conv2: String,
    conv2_b: String,
}

impl ResBlock {
    fn new(store: &mut ParamStore, seed: u64, name: &str, ch: usize, t_dim: usize) -> Self {
        let reg_norm = |store: &mut ParamStore, g: &str, b: &str| {
            store.register(seed, g, &[ch, 1, 1], Init::Ones);
            store.register(seed, b, &[ch, 1, 1], Init::Zeros);
        };
        let rb = ResBlock {
            n1_g: format!("{name}.n1.g"),
            n1_b: format!("{name}.n1.b"),
            conv1: format!("{name}.conv1.w"),
            conv1_b: format!("{name}.conv1.b"),
            t_proj: Linear::new(store, seed, &format!("{name}.temb"), t_dim, 2 * ch, true),
            n2_g: format!("{name}.n2.g"),
            n2_b: format!("{name}.n2.b"),
            conv2: format!("{name}.conv2.w"),
            conv2_b: format!("{name}.conv2.b"),
        };
        reg_norm(store, &rb.n1_g, &rb.n1_b);
        reg_norm(store, &rb.n2_g, &rb.n2_b);
        store.register(seed, &rb.conv1, &[ch, ch, 3, 3], Init::FanIn(ch * 9));
        store.register(seed, &rb.conv1_b, &[ch, 1, 1], Init::Zeros);
        store.register(seed, &rb.conv2, &[ch, ch, 3, 3], Init::FanIn(ch * 9));
        store.register(seed, &rb.conv2_b, &[ch, 1, 1], Init::Zeros);
        rb
    }

    /// Pre-activation residual block. The timestep embedding modulates the
    /// second normalization by scale/shift; a plain additive injection
    /// would be canceled by the per-channel normalization that follows.
    fn forward(&self, p: &LiveParams, x: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let b = x.shape()[0];
        let ch = x.shape()[1];
        let mut h = instance_norm(x, p.get(&self.n1_g)?, p.get(&self.n1_b)?, 1e-5)?.silu();
        h = h.conv2d(p.get(&self.conv1)?, 1, 1)?.add(p.get(&self.conv1_b)?)?;
        let t = self.t_proj.forward(p, t_emb)?; // [b, 2ch]
        let ts = t.slice_axis(1, 0, ch)?.reshape(&[b, ch, 1, 1])?;
        let tb = t.slice_axis(1, ch, 2 * ch)?.reshape(&[b, ch, 1, 1])?;
        h = instance_norm(&h, p.get(&self.n2_g)?, p.get(&self.n2_b)?, 1e-5)?;
        h = h.mul(&ts.add_scalar(1.0))?.add(&tb)?.silu();
        h = h.conv2d(p.get(&self.conv2)?, 1, 1)?.add(p.get(&self.conv2_b)?)?;
        Ok(x.add(&h)?)
    }
}

struct CrossAttention {
    ln_g: String,
    ln_b: String,
    wq: String,
    wk: String,
    wv: String,
    wo: String,
}

impl CrossAttention {
    fn new(store: &mut ParamStore, seed: u64, name: &str, ch: usize, ctx_dim: usize) -> Self {
        let ca = CrossAttention {
            ln_g: format!("{name}.ln.g"),
            ln_b: format!("{name}.ln.b"),
            wq: format!("{name}.wq"),
            wk: format!("{name}.wk"),
            wv: format!("{name}.wv"),
            wo: format!("{name}.wo"),
        };
        store.register(seed, &ca.ln_g, &[ch], Init::Ones);
        store.register(seed, &ca.ln_b, &[ch], Init::Zeros);
        store.register(seed, &ca.wq, &[ch, ch], Init::FanIn(ch));
        store.register(seed, &ca.wk, &[ctx_dim, ch], Init::FanIn(ctx_dim));
        store.register(seed, &ca.wv, &[ctx_dim, ch], Init::FanIn(ctx_dim));
        // bias-free output projection: a fully masked context must
        // contribute exactly zero through the residual
        store.register(seed, &ca.wo, &[ch, ch], Init::FanIn(ch));
        ca
    }

    fn linear3(x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let e = w.shape()[1];
        Ok(x.reshape(&[b * l, d])?.matmul(w)?.reshape(&[b, l, e])?)
    }

    /// Spatial positions attend to the context tokens; purely additive on
    /// the residual path.
    fn forward(
        &self,
        p: &LiveParams,
        x: &Tensor,
        ctx: &Tensor,
        ctx_mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let [b, c, h, w] = [
            x.shape()[0],
            x.shape()[1],
            x.shape()[2],
            x.shape()[3],
        ];
        let tokens = x.reshape(&[b, c, h * w])?.transpose_last2()?; // [b, hw, c]
        let normed = layer_norm(&tokens, p.get(&self.ln_g)?, p.get(&self.ln_b)?, 1e-5)?;
        let q = Self::linear3(&normed, p.get(&self.wq)?)?;
        let k = Self::linear3(ctx, p.get(&self.wk)?)?;
        let v = Self::linear3(ctx, p.get(&self.wv)?)?;
        let attn = scaled_dot_attention(&q, &k, &v, ctx_mask)?;
        let o = Self::linear3(&attn, p.get(&self.wo)?)?;
        let merged = tokens.add(&o)?;
        Ok(merged.transpose_last2()?.reshape(&[b, c, h, w])?)
    }
}

/// Two-level conditional U-Net; cross-attention sits at the bottleneck.
pub struct UNet {
    pub cfg: UNetConfig,
    t_fuse: Linear,
    conv_in: String,
    conv_in_b: String,
    res1: ResBlock,
    down: String,
    down_b: String,
    res2: ResBlock,
    attn: Option<CrossAttention>,
    res3: ResBlock,
    up: String,
    up_b: String,
    fuse: String,
    fuse_b: String,
    res4: ResBlock,
    conv_out: String,
    conv_out_b: String,
}

impl UNet {
    pub fn new(store: &mut ParamStore, seed: u64, cfg: UNetConfig) -> Self {
        let [c1, c2] = cfg.widths;
        let cin = cfg.in_channels;
        let t_fuse = Linear::new(
            store,
            seed,
            "unet.tfuse",
            cfg.t_sin_dim + cfg.extra_dim,
            cfg.t_dim,
            true,
        );
        let unet = UNet {
            t_fuse,
            conv_in: "unet.conv_in.w".into(),
            conv_in_b: "unet.conv_in.b".into(),
            res1: ResBlock::new(store, seed, "unet.res1", c1, cfg.t_dim),
            down: "unet.down.w".into(),
            down_b: "unet.down.b".into(),
            res2: ResBlock::new(store, seed, "unet.res2", c2, cfg.t_dim),
            attn: cfg
                .context_dim
                .map(|d| CrossAttention::new(store, seed, "unet.attn", c2, d)),
            res3: ResBlock::new(store, seed, "unet.res3", c2, cfg.t_dim),
            up: "unet.up.w".into(),
            up_b: "unet.up.b".into(),
            fuse: "unet.fuse.w".into(),
            fuse_b: "unet.fuse.b".into(),
            res4: ResBlock::new(store, seed, "unet.res4", c1, cfg.t_dim),
            conv_out: "unet.conv_out.w".into(),
            conv_out_b: "unet.conv_out.b".into(),
            cfg,
        };
        let cfg = &unet.cfg;
        store.register(seed, &unet.conv_in, &[c1, cin, 3, 3], Init::FanIn(cin * 9));
        store.register(seed, &unet.conv_in_b, &[c1, 1, 1], Init::Zeros);
        store.register(seed, &unet.down, &[c2, c1, 3, 3], Init::FanIn(c1 * 9));
        store.register(seed, &unet.down_b, &[c2, 1, 1], Init::Zeros);
        store.register(seed, &unet.up, &[c1, c2, 3, 3], Init::FanIn(c2 * 9));
        store.register(seed, &unet.up_b, &[c1, 1, 1], Init::Zeros);
        store.register(seed, &unet.fuse, &[c1, 2 * c1, 1, 1], Init::FanIn(2 * c1));
        store.register(seed, &unet.fuse_b, &[c1, 1, 1], Init::Zeros);
        store.register(
            seed,
            &unet.conv_out,
            &[cfg.in_channels, c1, 3, 3],
            Init::FanIn(c1 * 9),
        );
        store.register(seed, &unet.conv_out_b, &[cfg.in_channels, 1, 1], Init::Zeros);
        unet
    }

    /// Sinusoid concatenated with the conditioning extras, fused by one
    /// affine into the timestep embedding shared by all residual blocks.
    pub fn timestep_embed(&self, p: &LiveParams, t_sin: &Tensor, extras: &Tensor) -> Result<Tensor> {
        let e = extras.reshape(&[1, extras.len()])?;
        let joint = concat(1, &[t_sin, &e])?;
        self.t_fuse.forward(p, &joint)
    }

    /// Batch variant of the timestep fuse over pre-concatenated rows
    /// `[B, t_sin + extras]`.
    pub fn timestep_embed_batch(&self, p: &LiveParams, joint: &Tensor) -> Result<Tensor> {
        self.t_fuse.forward(p, joint)
    }

    /// Predict ε for a batch. `t_emb` is `[B, t_dim]`; `context`, when
    /// present, is `([B, Lc, ctx_dim], mask [B, Lc])`.
    pub fn forward(
        &self,
        p: &LiveParams,
        z_t: &Tensor,
        t_emb: &Tensor,
        context: Option<(&Tensor, Option<&Tensor>)>,
    ) -> Result<Tensor> {
        if z_t.rank() != 4 || z_t.shape()[1] != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "unet: latent {:?} does not match {} input channels",
                z_t.shape(),
                self.cfg.in_channels
            )));
        }
        if z_t.shape()[2] % 2 != 0 || z_t.shape()[3] % 2 != 0 {
            return Err(Error::Config(format!(
                "unet: spatial dims {:?} not divisible by 2",
                &z_t.shape()[2..]
            )));
        }
        let h0 = z_t
            .conv2d(p.get(&self.conv_in)?, 1, 1)?
            .add(p.get(&self.conv_in_b)?)?;
        let h1 = self.res1.forward(p, &h0, t_emb)?;
        let d = h1
            .conv2d(p.get(&self.down)?, 2, 1)?
            .add(p.get(&self.down_b)?)?;
        let mut mid = self.res2.forward(p, &d, t_emb)?;
        if let (Some(attn), Some((ctx, mask))) = (&self.attn, context) {
            mid = attn.forward(p, &mid, ctx, mask)?;
        }
        mid = self.res3.forward(p, &mid, t_emb)?;
        let u = mid
            .upsample_nearest2x()?
            .conv2d(p.get(&self.up)?, 1, 1)?
            .add(p.get(&self.up_b)?)?;
        let cat = concat(1, &[&u, &h1])?;
        let fused = cat
            .conv2d(p.get(&self.fuse)?, 1, 0)?
            .add(p.get(&self.fuse_b)?)?;
        let h3 = self.res4.forward(p, &fused, t_emb)?;
        Ok(h3
            .conv2d(p.get(&self.conv_out)?, 1, 1)?
            .add(p.get(&self.conv_out_b)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_unet(extra: usize, ctx: Option<usize>) -> (ParamStore, UNet) {
        let mut store = ParamStore::new();
        let mut cfg = UNetConfig::new(4, extra, ctx);
        cfg.widths = [8, 16];
        cfg.t_sin_dim = 16;
        cfg.t_dim = 16;
        let unet = UNet::new(&mut store, 42, cfg);
        (store, unet)
    }

    #[test]
    fn sinusoid_layout_at_zero_and_distinctness() {
        let e = timestep_sinusoid(0, 64);
        for i in 0..32 {
            assert_eq!(e.data()[2 * i], 0.0, "even slot {i}");
            assert_eq!(e.data()[2 * i + 1], 1.0, "odd slot {i}");
        }
        let a = timestep_sinusoid(0, 64);
        let b = timestep_sinusoid(500, 64);
        let c = timestep_sinusoid(999, 64);
        assert_ne!(a.data(), b.data());
        assert_ne!(b.data(), c.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn timestep_embed_concat_width() {
        let (store, unet) = small_unet(4, None);
        // pre-projection length = t_sin + extras
        assert_eq!(
            store.get("unet.tfuse.w").unwrap().shape(),
            &[16 + 4, 16]
        );
        let p = store.frozen();
        let extras = Tensor::from_vec(vec![0.1, 0.9, 0.5, 0.5]);
        let e = unet
            .timestep_embed(&p, &timestep_sinusoid(3, 16), &extras)
            .unwrap();
        assert_eq!(e.shape(), &[1, 16]);
    }

    #[test]
    fn output_shape_matches_input_for_all_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(&[2, 4, 8, 8], &mut rng);

        let (store, unet) = small_unet(2, None);
        let p = store.frozen();
        let t = Tensor::randn(&[2, 16], &mut rng);
        let out = unet.forward(&p, &z, &t, None).unwrap();
        assert_eq!(out.shape(), z.shape());

        let (store, unet) = small_unet(4, Some(8));
        let p = store.frozen();
        let ctx = Tensor::randn(&[2, 3, 8], &mut rng);
        let out = unet.forward(&p, &z, &t, Some((&ctx, None))).unwrap();
        assert_eq!(out.shape(), z.shape());
    }

    #[test]
    fn absent_context_equals_fully_masked_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (store, unet) = small_unet(2, Some(8));
        let p = store.frozen();
        let z = Tensor::randn(&[1, 4, 8, 8], &mut rng);
        let t = Tensor::randn(&[1, 16], &mut rng);

        let none = unet.forward(&p, &z, &t, None).unwrap();
        let ctx = Tensor::randn(&[1, 5, 8], &mut rng);
        let mask = Tensor::zeros(&[1, 5]);
        let masked = unet.forward(&p, &z, &t, Some((&ctx, Some(&mask)))).unwrap();
        assert_eq!(none.data(), masked.data());
    }

    #[test]
    fn flipping_class_extras_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, unet) = small_unet(4, None);
        let p = store.frozen();
        let z = Tensor::randn(&[1, 4, 8, 8], &mut rng);
        let sin = timestep_sinusoid(100, 16);

        let pos = Tensor::from_vec(vec![0.0, 1.0, 0.5, 0.5]);
        let neg = Tensor::from_vec(vec![1.0, 0.0, 0.5, 0.5]);
        let t_pos = unet.timestep_embed(&p, &sin, &pos).unwrap();
        let t_neg = unet.timestep_embed(&p, &sin, &neg).unwrap();
        let a = unet.forward(&p, &z, &t_pos, None).unwrap();
        let b = unet.forward(&p, &z, &t_neg, None).unwrap();

        let diff: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff / norm > 1e-6, "relative diff {}", diff / norm);
    }

    #[test]
    fn conditioning_reaches_output_via_jvp() {
        // finite-difference JVP of the output wrt timestep extras
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, unet) = small_unet(4, None);
        let p = store.frozen();
        let z = Tensor::randn(&[1, 4, 8, 8], &mut rng);
        let sin = timestep_sinusoid(10, 16);
        let e0 = Tensor::from_vec(vec![0.5, 0.5, 0.4, 0.8]);
        let dir = Tensor::from_vec(vec![1.0, -1.0, 0.3, -0.2]);
        let h = 1e-5;
        let ep = e0.add(&dir.scale(h)).unwrap();
        let em = e0.sub(&dir.scale(h)).unwrap();
        let yp = unet
            .forward(&p, &z, &unet.timestep_embed(&p, &sin, &ep).unwrap(), None)
            .unwrap();
        let ym = unet
            .forward(&p, &z, &unet.timestep_embed(&p, &sin, &em).unwrap(), None)
            .unwrap();
        let jvp_norm: f64 = yp
            .data()
            .iter()
            .zip(ym.data())
            .map(|(a, b)| ((a - b) / (2.0 * h)).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(jvp_norm > 1e-8, "JVP norm {jvp_norm}");
    }
}
