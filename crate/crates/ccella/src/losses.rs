//! Loss functions: L1 noise-prediction loss, focal classification loss,
//! and the joint objective with per-sample missing-text gating.

use serde::{Deserialize, Serialize};
use tensor_core::{Elem, Tensor};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;

/// Scalar record of one step's objective. The identity
/// `total == l_noise + lambda_eff * l_class` holds exactly (same fp ops).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_noise: f64,
    pub l_class: Option<f64>,
    pub lambda: f64,
    pub lambda_eff: f64,
    pub total: f64,
}

/// Mean absolute error between predicted and true noise.
pub fn noise_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps_hat.shape() != eps.shape() {
        return Err(Error::Config(format!(
            "noise_loss: {:?} vs {:?}",
            eps_hat.shape(),
            eps.shape()
        )));
    }
    Ok(eps_hat.sub(eps)?.abs().mean())
}

/// Focal loss for binary logits `[2]`: `−(1−p_true)^γ · log p_true` with
/// p from softmax. γ = 0 reduces to cross-entropy.
pub fn focal_loss(logits: &Tensor, label: bool, gamma: f64) -> Result<Tensor> {
    if logits.shape() != [2] {
        return Err(Error::Config(format!(
            "focal_loss expects logits [2], got {:?}",
            logits.shape()
        )));
    }
    let idx = label as usize;
    let logp = logits.log_softmax_last();
    let logp_true = logp.slice_axis(0, idx, idx + 1)?;
    let p_true = logp_true.exp();
    let weight = p_true.neg().add_scalar(1.0).pow_scalar(gamma as Elem);
    Ok(weight.mul(&logp_true.neg())?.sum())
}

/// One sample's classification inputs for the joint objective.
pub struct ClassTerm {
    pub logits: Tensor,
    pub label: bool,
    pub text_present: bool,
}

pub struct JointLoss {
    /// Scalar on the tape; drive backward from here.
    pub total: Tensor,
    pub terms: LossTerms,
}

/// Eq-style joint objective: `total = l_noise + λ_eff · l_class`, where
/// `l_class` averages focal terms over text-present samples only and
/// `λ_eff` drops to 0 when no sample in the batch carries text (or in
/// L1-only training).
pub fn joint_loss(
    eps_hat: &Tensor,
    eps: &Tensor,
    class_terms: &[ClassTerm],
    lambda: f64,
    gamma: f64,
    l1_only: bool,
) -> Result<JointLoss> {
    let l_noise = noise_loss(eps_hat, eps)?;
    let selected: Vec<&ClassTerm> = if l1_only {
        Vec::new()
    } else {
        class_terms.iter().filter(|c| c.text_present).collect()
    };
    if selected.is_empty() {
        let terms = LossTerms {
            l_noise: l_noise.item(),
            l_class: None,
            lambda,
            lambda_eff: 0.0,
            total: l_noise.item(),
        };
        return Ok(JointLoss {
            total: l_noise,
            terms,
        });
    }
    let mut acc: Option<Tensor> = None;
    for c in &selected {
        let f = focal_loss(&c.logits, c.label, gamma)?;
        acc = Some(match acc {
            None => f,
            Some(a) => a.add(&f)?,
        });
    }
    let l_class = acc.unwrap().scale(1.0 / selected.len() as Elem);
    let total = l_noise.add(&l_class.scale(lambda as Elem))?;
    let terms = LossTerms {
        l_noise: l_noise.item(),
        l_class: Some(l_class.item()),
        lambda,
        lambda_eff: lambda,
        total: total.item(),
    };
    Ok(JointLoss { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tensor_core::{gradcheck, GradcheckOpts, Tape};

    #[test]
    fn noise_loss_values() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(noise_loss(&a, &a).unwrap().item(), 0.0);
        let b = a.add_scalar(0.7);
        assert!((noise_loss(&b, &a).unwrap().item() - 0.7).abs() < 1e-12);
        let bad = Tensor::zeros(&[4]);
        assert!(noise_loss(&a, &bad).is_err());
    }

    #[test]
    fn noise_loss_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[3, 4], &mut rng);
        let b = Tensor::randn(&[3, 4], &mut rng);
        let report = gradcheck(
            |xs| Ok(noise_loss(&xs[0], &xs[1]).unwrap()),
            &[a, b],
            &GradcheckOpts::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy_at_half() {
        // equal logits → p_true = 0.5; γ=0 → loss = ln 2
        let logits = Tensor::from_vec(vec![0.3, 0.3]);
        let l = focal_loss(&logits, true, 0.0).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12, "{l}");
    }

    #[test]
    fn focal_matches_scalar_oracle_at_p09() {
        // choose logits with p_true = 0.9: logit gap ln(9)
        let gap = (9.0f64).ln();
        let logits = Tensor::from_vec(vec![0.0, gap]);
        let l = focal_loss(&logits, true, 2.0).unwrap().item();
        // oracle: (1-0.9)^2 * (−ln 0.9) = 1.0536052e-3
        let oracle = 0.01 * -(0.9f64.ln());
        assert!((l - oracle).abs() < 1e-9, "focal {l} vs oracle {oracle}");
        assert!((l - 1.0536052e-3).abs() < 1e-9);
    }

    #[test]
    fn focal_vanishes_monotonically_as_p_grows() {
        let mut last = f64::INFINITY;
        for gap in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let logits = Tensor::from_vec(vec![0.0, gap]);
            let l = focal_loss(&logits, true, 2.0).unwrap().item();
            assert!(l < last, "not monotone at gap {gap}");
            last = l;
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn focal_gamma_zero_equals_cross_entropy_over_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let logits =
                Tensor::from_vec(vec![rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)]);
            let label: bool = rng.gen();
            let focal = focal_loss(&logits, label, 0.0).unwrap().item();
            // independent cross-entropy: −log softmax[label]
            let (a, b) = (logits.data()[0], logits.data()[1]);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            let ce = lse - if label { b } else { a };
            assert!((focal - ce).abs() < 1e-12, "{focal} vs {ce}");
        }
    }

    #[test]
    fn focal_composite_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = Tensor::randn(&[2], &mut rng);
        let report = gradcheck(
            |xs| Ok(focal_loss(&xs[0], true, 2.0).unwrap()),
            &[logits],
            &GradcheckOpts::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn joint_loss_gates_on_text_presence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps_hat = Tensor::randn(&[4, 4], &mut rng);
        let eps = Tensor::randn(&[4, 4], &mut rng);

        // no text anywhere: total == l_noise exactly
        let terms: Vec<ClassTerm> = (0..3)
            .map(|_| ClassTerm {
                logits: Tensor::randn(&[2], &mut rng),
                label: true,
                text_present: false,
            })
            .collect();
        let j = joint_loss(&eps_hat, &eps, &terms, 1e-4, 2.0, false).unwrap();
        assert!(j.terms.l_class.is_none());
        assert_eq!(j.terms.lambda_eff, 0.0);
        assert_eq!(j.terms.total, j.terms.l_noise);

        // L1-only forces the same gating even with text present
        let terms: Vec<ClassTerm> = (0..3)
            .map(|_| ClassTerm {
                logits: Tensor::randn(&[2], &mut rng),
                label: true,
                text_present: true,
            })
            .collect();
        let j = joint_loss(&eps_hat, &eps, &terms, 1e-4, 2.0, true).unwrap();
        assert!(j.terms.l_class.is_none());
        assert_eq!(j.terms.total, j.terms.l_noise);
    }

    #[test]
    fn mixed_batch_averages_over_flagged_samples_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let eps_hat = Tensor::randn(&[2, 2], &mut rng);
        let eps = Tensor::randn(&[2, 2], &mut rng);
        let mut terms = Vec::new();
        for i in 0..16 {
            terms.push(ClassTerm {
                logits: Tensor::randn(&[2], &mut rng),
                label: i % 2 == 0,
                text_present: i < 3,
            });
        }
        let j = joint_loss(&eps_hat, &eps, &terms, 1e-4, 2.0, false).unwrap();
        // hand-rolled loop oracle over the 3 flagged samples
        let mut acc = 0.0;
        for c in terms.iter().take(3) {
            acc += focal_loss(&c.logits, c.label, 2.0).unwrap().item();
        }
        let oracle = acc / 3.0;
        assert!((j.terms.l_class.unwrap() - oracle).abs() < 1e-12);
        // ledger identity, exact
        assert_eq!(
            j.terms.total,
            j.terms.l_noise + j.terms.lambda_eff * j.terms.l_class.unwrap()
        );
    }

    #[test]
    fn class_grads_flow_only_when_gated_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let plain_logits = Tensor::randn(&[2], &mut rng);
        let eh = Tensor::randn(&[2], &mut rng);
        let e = Tensor::randn(&[2], &mut rng);

        for (text_present, expect_grad) in [(true, true), (false, false)] {
            let tape = Tape::new();
            let logits = tape.var(&plain_logits);
            let terms = vec![ClassTerm {
                logits: logits.clone(),
                label: true,
                text_present,
            }];
            let j = joint_loss(&tape.var(&eh), &tape.var(&e), &terms, 1e-4, 2.0, false).unwrap();
            j.total.backward().unwrap();
            let got = logits.grad().map(|g| g.data().iter().any(|&v| v != 0.0));
            assert_eq!(got.unwrap_or(false), expect_grad);
        }
    }
}
