//! Procedural phantom generator with exact ground truth, plus the fixed
//! (non-learned) oracle detector that reads lesion presence back out of an
//! image.
//!
//! A phantom is a smooth background, a soft-edged organ ellipse, a zonal
//! sub-ellipse, zero to three bright lesion blobs fully inside the organ,
//! and seeded noise. In volumetric mode the slice axis is stored as the
//! leading (channel) axis, so every downstream 2-D operator treats slices
//! as channels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensor_core::{Elem, Tensor};

use crate::nn::derive_rng_indexed;
use crate::report::render_report;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    /// 1 = planar mode; >1 stacks slices on the channel axis.
    pub slices: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 32,
            width: 32,
            slices: 1,
        }
    }
}

impl PhantomConfig {
    pub fn volumetric_desk() -> Self {
        PhantomConfig {
            height: 16,
            width: 16,
            slices: 8,
        }
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.slices, self.height, self.width]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Lesion {
    pub y: f64,
    pub x: f64,
    /// Slice coordinate; 0 in planar mode.
    pub z: f64,
    pub radius: f64,
    pub z_radius: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct LesionDescriptor {
    pub lesions: Vec<Lesion>,
}

impl LesionDescriptor {
    pub fn lesion_count(&self) -> usize {
        self.lesions.len()
    }
}

#[derive(Debug, Clone)]
pub struct PhantomSample {
    /// `[S,H,W]`, values in [0,1]. S = 1 in planar mode.
    pub image: Tensor,
    pub report: Option<Vec<u16>>,
    pub label: bool,
    /// Synthetic in-plane mm/pixel.
    pub spacing: [f64; 2],
    pub truth: LesionDescriptor,
}

pub const SPACING_RANGE: (f64, f64) = (0.3, 1.0);
/// Divisor that maps spacing into [0,1] for timestep conditioning.
pub const SPACING_NORM: f64 = 1.0;

const LESION_RADIUS_RANGE: (f64, f64) = (2.6, 5.6);
const LESION_CONTRAST_RANGE: (f64, f64) = (0.26, 0.5);

struct OrganGeometry {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
}

impl OrganGeometry {
    /// Normalized elliptic distance of a point (1.0 = boundary).
    fn dist(&self, y: f64, x: f64) -> f64 {
        let dy = (y - self.cy) / self.ay;
        let dx = (x - self.cx) / self.ax;
        (dy * dy + dx * dx).sqrt()
    }
}

fn soft_edge(d: f64, sharpness: f64) -> f64 {
    1.0 / (1.0 + ((d - 1.0) * sharpness).exp())
}

/// Deterministic phantom for a seed. `class_bias` is the probability of a
/// positive (lesion-bearing) sample.
pub fn generate_phantom(cfg: &PhantomConfig, seed: u64, class_bias: f64) -> PhantomSample {
    assert!((0.0..=1.0).contains(&class_bias), "class_bias in [0,1]");
    let mut rng = derive_rng_indexed(seed, "phantom", 0);
    let (h, w, s) = (cfg.height, cfg.width, cfg.slices);

    // Label and lesion count come first so the rest of the stream is
    // identical between forced-negative and forced-positive draws.
    let positive = rng.gen_bool(class_bias);
    let count = if positive {
        let r: f64 = rng.gen();
        if r < 0.5 {
            1
        } else if r < 0.8 {
            2
        } else {
            3
        }
    } else {
        0
    };

    // background gradient
    let base = 0.18;
    let gx: f64 = rng.gen_range(-0.08..0.08);
    let gy: f64 = rng.gen_range(-0.08..0.08);

    // organ ellipse
    let organ = OrganGeometry {
        cy: h as f64 / 2.0 + rng.gen_range(-1.5..1.5),
        cx: w as f64 / 2.0 + rng.gen_range(-1.5..1.5),
        ay: h as f64 * rng.gen_range(0.30..0.38),
        ax: w as f64 * rng.gen_range(0.32..0.42),
    };
    let cz = s as f64 / 2.0;
    let az = if s > 1 { s as f64 * 0.55 } else { 1.0 };

    // zonal sub-ellipse, nudged toward the lower half
    let zone = OrganGeometry {
        cy: organ.cy + 0.12 * organ.ay,
        cx: organ.cx,
        ay: organ.ay * 0.55,
        ax: organ.ax * 0.6,
    };

    // lesions, centers kept well inside the organ
    let mut lesions = Vec::with_capacity(count);
    for _ in 0..count {
        let (y, x) = loop {
            let y = organ.cy + rng.gen_range(-0.9..0.9) * organ.ay;
            let x = organ.cx + rng.gen_range(-0.9..0.9) * organ.ax;
            if organ.dist(y, x) <= 0.55 {
                break (y, x);
            }
        };
        let z = if s > 1 {
            cz + rng.gen_range(-0.35..0.35) * s as f64
        } else {
            0.0
        };
        let scale = (h.min(w) as f64) / 32.0;
        lesions.push(Lesion {
            y,
            x,
            z,
            radius: rng.gen_range(LESION_RADIUS_RANGE.0..LESION_RADIUS_RANGE.1) * scale,
            z_radius: if s > 1 { rng.gen_range(1.2..2.5) } else { 1.0 },
            contrast: rng.gen_range(LESION_CONTRAST_RANGE.0..LESION_CONTRAST_RANGE.1),
        });
    }

    let spacing = [
        rng.gen_range(SPACING_RANGE.0..SPACING_RANGE.1),
        rng.gen_range(SPACING_RANGE.0..SPACING_RANGE.1),
    ];

    // render, then add noise from the same stream
    let mut data = vec![0.0 as Elem; s * h * w];
    for zi in 0..s {
        // organ cross-section shrinks away from the central slice
        let zfrac = if s > 1 {
            let dz = (zi as f64 + 0.5 - cz) / az;
            (1.0 - dz * dz).max(0.0).sqrt()
        } else {
            1.0
        };
        for yi in 0..h {
            for xi in 0..w {
                let (yf, xf) = (yi as f64 + 0.5, xi as f64 + 0.5);
                let mut v = base
                    + gy * (yf / h as f64 - 0.5)
                    + gx * (xf / w as f64 - 0.5);
                if zfrac > 0.0 {
                    let local = OrganGeometry {
                        cy: organ.cy,
                        cx: organ.cx,
                        ay: organ.ay * zfrac,
                        ax: organ.ax * zfrac,
                    };
                    v += 0.34 * soft_edge(local.dist(yf, xf), 12.0);
                    let zlocal = OrganGeometry {
                        cy: zone.cy,
                        cx: zone.cx,
                        ay: (zone.ay * zfrac).max(1e-6),
                        ax: (zone.ax * zfrac).max(1e-6),
                    };
                    v += 0.10 * soft_edge(zlocal.dist(yf, xf), 10.0);
                }
                for l in &lesions {
                    let sigma = l.radius * 0.6;
                    let d2 = ((yf - l.y).powi(2) + (xf - l.x).powi(2)) / (2.0 * sigma * sigma);
                    let dz2 = if s > 1 {
                        let dz = (zi as f64 + 0.5 - l.z) / l.z_radius;
                        0.5 * dz * dz
                    } else {
                        0.0
                    };
                    v += l.contrast * (-(d2 + dz2)).exp();
                }
                data[(zi * h + yi) * w + xi] = v as Elem;
            }
        }
    }
    for v in data.iter_mut() {
        let noise: f64 = rng.gen_range(-1.0..1.0) * 0.018;
        *v = (*v + noise as Elem).clamp(0.0, 1.0);
    }

    let truth = LesionDescriptor { lesions };
    let style_seed = rng.gen::<u64>();
    let report = render_report(&truth, style_seed, h, w);
    PhantomSample {
        image: Tensor::new(&[s, h, w], data).expect("shape matches data"),
        report: Some(report),
        label: positive,
        spacing,
        truth,
    }
}

/// Sample only a ground-truth descriptor (for building generation prompts).
pub fn sample_truth(cfg: &PhantomConfig, rng: &mut ChaCha8Rng, positive: bool) -> LesionDescriptor {
    let (h, w, s) = (cfg.height, cfg.width, cfg.slices);
    let count = if positive {
        let r: f64 = rng.gen();
        if r < 0.5 {
            1
        } else if r < 0.8 {
            2
        } else {
            3
        }
    } else {
        0
    };
    let scale = (h.min(w) as f64) / 32.0;
    let lesions = (0..count)
        .map(|_| Lesion {
            y: h as f64 * rng.gen_range(0.3..0.7),
            x: w as f64 * rng.gen_range(0.3..0.7),
            z: if s > 1 { s as f64 * rng.gen_range(0.3..0.7) } else { 0.0 },
            radius: rng.gen_range(LESION_RADIUS_RANGE.0..LESION_RADIUS_RANGE.1) * scale,
            z_radius: if s > 1 { rng.gen_range(1.2..2.5) } else { 1.0 },
            contrast: rng.gen_range(LESION_CONTRAST_RANGE.0..LESION_CONTRAST_RANGE.1),
        })
        .collect();
    LesionDescriptor { lesions }
}

/// Matched-filter threshold pinned by calibration on clean phantoms
/// (negative scores top out near 0.12, positive scores start near 0.19).
pub const ORACLE_THRESHOLD: f64 = 0.15;

/// Peak blob response over all slices: disk mean minus surrounding ring
/// mean, evaluated inside the nominal organ region.
pub fn oracle_score(image: &Tensor, cfg: &PhantomConfig) -> f64 {
    let (h, w, s) = (cfg.height, cfg.width, cfg.slices);
    assert_eq!(image.shape(), &[s, h, w], "oracle expects [S,H,W]");
    let data = image.data();
    let disk_r = ((h.min(w) as f64) / 32.0 * 2.0).max(1.0);
    let ring_lo = disk_r * 2.0;
    let ring_hi = disk_r * 3.2;
    let margin = ring_hi.ceil() as i64;

    // nominal organ interior: generous central ellipse
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (ay, ax) = (h as f64 * 0.34, w as f64 * 0.37);

    let mut best = f64::NEG_INFINITY;
    for zi in 0..s {
        let plane = &data[zi * h * w..(zi + 1) * h * w];
        for yi in margin..(h as i64 - margin) {
            for xi in margin..(w as i64 - margin) {
                let dy = (yi as f64 + 0.5 - cy) / ay;
                let dx = (xi as f64 + 0.5 - cx) / ax;
                if dy * dy + dx * dx > 0.8 {
                    continue;
                }
                let mut disk_sum = 0.0;
                let mut disk_n = 0.0;
                let mut ring_sum = 0.0;
                let mut ring_n = 0.0;
                for oy in -margin..=margin {
                    for ox in -margin..=margin {
                        let r = ((oy * oy + ox * ox) as f64).sqrt();
                        let (y, x) = ((yi + oy) as usize, (xi + ox) as usize);
                        let v = plane[y * w + x] as f64;
                        if r <= disk_r {
                            disk_sum += v;
                            disk_n += 1.0;
                        } else if r >= ring_lo && r <= ring_hi {
                            ring_sum += v;
                            ring_n += 1.0;
                        }
                    }
                }
                let response = disk_sum / disk_n - ring_sum / ring_n;
                if response > best {
                    best = response;
                }
            }
        }
    }
    best
}

/// Non-learned lesion-presence read-out used to score generated images.
pub fn oracle_detect(image: &Tensor, cfg: &PhantomConfig) -> bool {
    oracle_score(image, cfg) > ORACLE_THRESHOLD
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::parse_report;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = PhantomConfig::default();
        let a = generate_phantom(&cfg, 42, 0.5);
        let b = generate_phantom(&cfg, 42, 0.5);
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.report, b.report);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.spacing, b.spacing);
    }

    #[test]
    fn zero_bias_forces_negative() {
        let cfg = PhantomConfig::default();
        for seed in 0..20 {
            let s = generate_phantom(&cfg, seed, 0.0);
            assert!(!s.label);
            assert_eq!(s.truth.lesion_count(), 0);
        }
    }

    #[test]
    fn label_matches_truth_and_image_in_range() {
        let cfg = PhantomConfig::default();
        for seed in 0..50 {
            let s = generate_phantom(&cfg, seed, 0.5);
            assert_eq!(s.label, s.truth.lesion_count() > 0);
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn lesions_stay_inside_organ_region() {
        let cfg = PhantomConfig::default();
        for seed in 0..200 {
            let s = generate_phantom(&cfg, seed, 1.0);
            for l in &s.truth.lesions {
                // centers confined to the organ interior by construction
                let dy = (l.y - cfg.height as f64 / 2.0).abs();
                let dx = (l.x - cfg.width as f64 / 2.0).abs();
                assert!(dy < cfg.height as f64 * 0.45);
                assert!(dx < cfg.width as f64 * 0.45);
            }
        }
    }

    #[test]
    fn positive_fraction_tracks_class_bias() {
        let cfg = PhantomConfig::default();
        let n = 10_000;
        let positives = (0..n)
            .filter(|&i| generate_phantom(&cfg, i, 0.48).label)
            .count();
        let frac = positives as f64 / n as f64;
        assert!((frac - 0.48).abs() < 0.02, "positive fraction {frac}");
    }

    #[test]
    fn report_parses_back_to_truth() {
        let cfg = PhantomConfig::default();
        for seed in 200..400 {
            let s = generate_phantom(&cfg, seed, 0.6);
            let toks = s.report.as_ref().unwrap();
            let parsed = parse_report(toks).unwrap();
            let want = crate::report::facts_from_truth(&s.truth, cfg.height, cfg.width);
            assert_eq!(parsed, want, "seed {seed}");
            assert_eq!(parsed.lesion_count() > 0, s.label);
        }
    }

    #[test]
    fn oracle_is_accurate_on_clean_phantoms() {
        let cfg = PhantomConfig::default();
        let n = 1000;
        let mut correct = 0;
        for seed in 0..n {
            let s = generate_phantom(&cfg, seed as u64, 0.5);
            if oracle_detect(&s.image, &cfg) == s.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / n as f64;
        assert!(acc >= 0.99, "oracle accuracy {acc}");
    }

    #[test]
    fn volumetric_mode_generates_and_scores() {
        let cfg = PhantomConfig::volumetric_desk();
        let s = generate_phantom(&cfg, 7, 1.0);
        assert_eq!(s.image.shape(), &[8, 16, 16]);
        assert!(s.truth.lesion_count() > 0);
    }
}
