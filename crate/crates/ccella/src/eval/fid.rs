//! Fréchet distance between feature distributions:
//! `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`, with the matrix square
//! root taken through the symmetrized product `Σa^{1/2} Σb Σa^{1/2}`.

use tensor_core::Tensor;

use crate::error::{Error, Result};
use crate::eval::features::{extract_features, FeatureExtractor, FeatureStats};

/// Eigenvalues below this magnitude are treated as exact zeros; anything
/// more negative marks an invalid covariance.
const NEG_EIG_TOLERANCE: f64 = 1e-8;

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Eigenvalues and eigenvectors of a symmetric matrix by cyclic Jacobi
/// rotations. Returns (eigenvalues, row-major eigenvector matrix whose
/// COLUMNS are the eigenvectors).
pub fn sym_eigenvalues(mat: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = mat.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let fro: f64 = mat.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = (fro * 1e-15).max(f64::MIN_POSITIVE);
    for _sweep in 0..256 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() < tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    (eig, v)
}

fn clamp_eig(e: f64, what: &str) -> Result<f64> {
    if e < -NEG_EIG_TOLERANCE {
        return Err(Error::Config(format!(
            "invalid covariance: {what} eigenvalue {e}"
        )));
    }
    Ok(e.max(0.0))
}

/// Symmetric PSD square root via eigendecomposition.
fn sym_sqrt(mat: &[f64], n: usize, what: &str) -> Result<Vec<f64>> {
    let (eig, v) = sym_eigenvalues(mat, n);
    let mut out = vec![0.0; n * n];
    let roots: Result<Vec<f64>> = eig.iter().map(|&e| Ok(clamp_eig(e, what)?.sqrt())).collect();
    let roots = roots?;
    // V diag(√λ) Vᵀ
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += v[i * n + k] * roots[k] * v[j * n + k];
            }
            out[i * n + j] = s;
        }
    }
    Ok(out)
}

/// Fréchet distance between two feature-statistic summaries.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Config(format!(
            "feature dims differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    let n = a.dim;
    let ca = a.covariance()?;
    let cb = b.covariance()?;

    let mean_term: f64 = a
        .mean()
        .iter()
        .zip(b.mean())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..n).map(|i| ca[i * n + i]).sum();
    let tr_b: f64 = (0..n).map(|i| cb[i * n + i]).sum();

    // Tr((Σa Σb)^{1/2}) through the symmetrized product
    let sqrt_a = sym_sqrt(&ca, n, "first argument")?;
    let inner = mat_mul(&sqrt_a, &mat_mul(&cb, &sqrt_a, n), n);
    // kill fp asymmetry before eigendecomposition
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = 0.5 * (inner[i * n + j] + inner[j * n + i]);
        }
    }
    let (eig, _) = sym_eigenvalues(&sym, n);
    let mut tr_sqrt = 0.0;
    for e in eig {
        tr_sqrt += clamp_eig(e, "product")?.sqrt();
    }
    Ok(mean_term + tr_a + tr_b - 2.0 * tr_sqrt)
}

/// Per-axis planar distance for volumetric sets: slices along each of the
/// three axes are pooled as 2-D image sets and scored separately.
pub fn planar_fid(
    extractor: &FeatureExtractor,
    vols_a: &[Tensor],
    vols_b: &[Tensor],
) -> Result<[f64; 3]> {
    let first = vols_a
        .first()
        .or_else(|| vols_b.first())
        .ok_or_else(|| Error::Config("planar distance over empty sets".to_string()))?;
    if first.rank() != 3 || first.shape()[0] < 2 {
        return Err(Error::Config(
            "planar distance requires volumetric images (more than one slice)".to_string(),
        ));
    }
    let mut out = [0.0; 3];
    for (axis, slot) in out.iter_mut().enumerate() {
        let stats_a = axis_stats(extractor, vols_a, axis)?;
        let stats_b = axis_stats(extractor, vols_b, axis)?;
        *slot = fid(&stats_a, &stats_b)?;
    }
    Ok(out)
}

fn axis_stats(
    extractor: &FeatureExtractor,
    vols: &[Tensor],
    axis: usize,
) -> Result<FeatureStats> {
    let mut slices = Vec::new();
    for vol in vols {
        let (s, h, w) = (vol.shape()[0], vol.shape()[1], vol.shape()[2]);
        let n_axis = vol.shape()[axis];
        for k in 0..n_axis {
            let plane = vol.slice_axis(axis, k, k + 1)?;
            let plane = match axis {
                0 => plane.reshape(&[1, h, w])?,
                1 => plane.reshape(&[1, s, w])?,
                _ => plane.reshape(&[1, s, h])?,
            };
            slices.push(plane);
        }
    }
    extract_features(extractor, &slices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::features::FEATURE_DIM;
    use crate::phantom::{generate_phantom, PhantomConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats_from(vectors: &[Vec<f64>]) -> FeatureStats {
        let mut s = FeatureStats::new(vectors[0].len());
        for v in vectors {
            s.push(v);
        }
        s
    }

    fn gaussian_cloud(
        rng: &mut ChaCha8Rng,
        n: usize,
        dim: usize,
        mean_shift: f64,
    ) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        (-2.0 * u1.ln()).sqrt() * u2.cos() + mean_shift
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn identical_stats_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = gaussian_cloud(&mut rng, 300, 8, 0.0);
        let s = stats_from(&cloud);
        let d = fid(&s, &s).unwrap();
        assert!(d.abs() < 1e-8, "self-distance {d}");
    }

    #[test]
    fn symmetry_and_nonnegativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = stats_from(&gaussian_cloud(&mut rng, 200, 6, 0.0));
        let b = stats_from(&gaussian_cloud(&mut rng, 220, 6, 0.4));
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
        assert!(ab >= -1e-8);
    }

    #[test]
    fn analytic_unit_gaussian_case() {
        // Σa = Σb = I, ‖Δμ‖ = 1  →  distance = 1. Build exact stats by
        // synthesizing points with identity sample covariance.
        let dim = 4;
        let mut pts_a = Vec::new();
        // orthonormal ± points give sample covariance I with mean 0:
        // use 2·dim·k points at ±√(n−1)/√(2k) e_i ... simpler: craft via
        // direct construction with known sums.
        // points: for each axis i, +c e_i and −c e_i, k copies
        let k = 5;
        let n = 2 * dim * k;
        let c = (((n - 1) as f64) / (2.0 * k as f64)).sqrt();
        for i in 0..dim {
            for _ in 0..k {
                let mut p = vec![0.0; dim];
                p[i] = c;
                pts_a.push(p.clone());
                p[i] = -c;
                pts_a.push(p);
            }
        }
        let sa = stats_from(&pts_a);
        // shift every point by the unit vector e_0
        let pts_b: Vec<Vec<f64>> = pts_a
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q[0] += 1.0;
                q
            })
            .collect();
        let sb = stats_from(&pts_b);

        // sanity: sample covariance is exactly identity
        let cov = sa.covariance().unwrap();
        for i in 0..dim {
            for j in 0..dim {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((cov[i * dim + j] - want).abs() < 1e-12);
            }
        }
        let d = fid(&sa, &sb).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "distance {d}");
    }

    #[test]
    fn two_by_two_matches_independent_scalar_oracle() {
        // independent closed-form 2×2 route: eigendecomposition of a
        // symmetric 2×2 via trace/determinant, no shared code
        fn eig2(m: &[f64; 4]) -> (f64, f64) {
            let tr = m[0] + m[3];
            let det = m[0] * m[3] - m[1] * m[2];
            let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
            (tr / 2.0 + disc, tr / 2.0 - disc)
        }
        fn sqrt2(m: &[f64; 4]) -> [f64; 4] {
            // Denman–Beavers-free closed form: sqrt(M) = (M + √det·I)/√(tr+2√det)
            let det = (m[0] * m[3] - m[1] * m[2]).max(0.0);
            let s = det.sqrt();
            let t = (m[0] + m[3] + 2.0 * s).sqrt();
            [(m[0] + s) / t, m[1] / t, m[2] / t, (m[3] + s) / t]
        }
        fn mul2(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
            [
                a[0] * b[0] + a[1] * b[2],
                a[0] * b[1] + a[1] * b[3],
                a[2] * b[0] + a[3] * b[2],
                a[2] * b[1] + a[3] * b[3],
            ]
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            // random SPD pairs via AᵀA + εI
            let spd = |rng: &mut ChaCha8Rng| -> [f64; 4] {
                let a: [f64; 4] = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                [
                    a[0] * a[0] + a[2] * a[2] + 0.1,
                    a[0] * a[1] + a[2] * a[3],
                    a[0] * a[1] + a[2] * a[3],
                    a[1] * a[1] + a[3] * a[3] + 0.1,
                ]
            };
            let ca = spd(&mut rng);
            let cb = spd(&mut rng);
            let mu_a: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let mu_b: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];

            // oracle: scalar formula
            let sqrt_ca = sqrt2(&ca);
            let prod = mul2(&sqrt_ca, &mul2(&cb, &sqrt_ca));
            let sym = [
                prod[0],
                0.5 * (prod[1] + prod[2]),
                0.5 * (prod[1] + prod[2]),
                prod[3],
            ];
            let (l1, l2) = eig2(&sym);
            let mean_term =
                (mu_a[0] - mu_b[0]).powi(2) + (mu_a[1] - mu_b[1]).powi(2);
            let oracle = mean_term + (ca[0] + ca[3]) + (cb[0] + cb[3])
                - 2.0 * (l1.max(0.0).sqrt() + l2.max(0.0).sqrt());

            // drive the implementation through synthetic FeatureStats with
            // exactly these moments
            let sa = stats_with_moments(&mu_a, &ca);
            let sb = stats_with_moments(&mu_b, &cb);
            let got = fid(&sa, &sb).unwrap();
            assert!(
                (got - oracle).abs() < 1e-9,
                "trial {trial}: {got} vs oracle {oracle}"
            );
        }
    }

    /// Build a FeatureStats whose sample mean/covariance match the given
    /// moments exactly (dim 2): four points at μ ± columns of a matrix L
    /// with LLᵀ·(2·2/(n−1)) = Σ ... use the 2-point-per-axis trick with
    /// the Cholesky factor.
    fn stats_with_moments(mu: &[f64; 2], cov: &[f64; 4]) -> FeatureStats {
        // Cholesky of 2x2
        let l11 = cov[0].sqrt();
        let l21 = cov[1] / l11;
        let l22 = (cov[3] - l21 * l21).max(1e-15).sqrt();
        // four points: μ ± c·L e_i, with c chosen so sample cov = Σ
        // n = 4, sum of squares per direction = 2c² → cov = 2c²/(n−1)·LLᵀ
        let c = ((4.0 - 1.0) / 2.0f64).sqrt();
        let dirs = [[l11, l21], [0.0, l22]];
        let mut s = FeatureStats::new(2);
        for d in dirs {
            s.push(&[mu[0] + c * d[0], mu[1] + c * d[1]]);
            s.push(&[mu[0] - c * d[0], mu[1] - c * d[1]]);
        }
        s
    }

    #[test]
    fn jacobi_matches_known_eigenvalues() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1
        let (mut eig, _) = sym_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2);
        eig.sort_by(f64::total_cmp);
        assert!((eig[0] - 1.0).abs() < 1e-12);
        assert!((eig[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_covariance_is_rejected() {
        // hand-build stats with a decisively negative eigenvalue by
        // corrupting via merge of impossible summaries is awkward; instead
        // check the clamp boundary directly
        assert!(clamp_eig(-1e-9, "x").is_ok());
        assert!(clamp_eig(-1e-6, "x").is_err());
    }

    #[test]
    fn planar_distance_on_volumes() {
        let cfg = PhantomConfig::volumetric_desk();
        let ex = FeatureExtractor::new();
        let vols_a: Vec<_> = (0..6)
            .map(|i| generate_phantom(&cfg, i, 0.5).image)
            .collect();
        let vols_b: Vec<_> = (0..6)
            .map(|i| generate_phantom(&cfg, 100 + i, 0.5).image)
            .collect();

        // identical sets → exactly zero everywhere
        let same = planar_fid(&ex, &vols_a, &vols_a).unwrap();
        for d in same {
            assert!(d.abs() < 1e-8);
        }

        let diff = planar_fid(&ex, &vols_a, &vols_b).unwrap();
        assert!(diff.iter().all(|d| d.is_finite()));

        // axis permutation of both sets permutes the triple
        let permute = |v: &Tensor| {
            // [S,H,W] -> [H,S,W] by explicit copy
            let (s, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
            let mut data = vec![0.0; v.len()];
            for a in 0..s {
                for b in 0..h {
                    for c in 0..w {
                        data[(b * s + a) * w + c] = v.data()[(a * h + b) * w + c];
                    }
                }
            }
            Tensor::new(&[h, s, w], data).unwrap()
        };
        let pa: Vec<_> = vols_a.iter().map(permute).collect();
        let pb: Vec<_> = vols_b.iter().map(permute).collect();
        let perm = planar_fid(&ex, &pa, &pb).unwrap();
        assert!((perm[0] - diff[1]).abs() < 1e-9);
        assert!((perm[1] - diff[0]).abs() < 1e-9);
        assert!((perm[2] - diff[2]).abs() < 1e-9);

        // planar mode rejects single-slice images
        let flat = generate_phantom(&PhantomConfig::default(), 0, 0.5).image;
        assert!(planar_fid(&ex, &[flat.clone()], &[flat]).is_err());
    }

    #[test]
    fn full_dim_self_distance_is_zero() {
        let cfg = PhantomConfig::default();
        let ex = FeatureExtractor::new();
        let imgs: Vec<_> = (0..(FEATURE_DIM + 5))
            .map(|i| generate_phantom(&cfg, i as u64, 0.5).image)
            .collect();
        let s = extract_features(&ex, &imgs).unwrap();
        assert!(s.full_rank_expected());
        let d = fid(&s, &s).unwrap();
        assert!(d.abs() < 1e-8, "self-distance {d}");
    }
}
