//! Classification metrics at a fixed decision threshold, plus the phantom
//! class-consistency probe.

use serde::{Deserialize, Serialize};
use tensor_core::Tensor;

use crate::error::{Error, Result};
use crate::phantom::{oracle_detect, PhantomConfig};

pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    /// Rank-based; absent when only one class is present.
    pub auc: Option<f64>,
    /// Precision-weighted recall increments; absent when only one class.
    pub ap: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Confusion counts at `threshold` (predict positive when score ≥
/// threshold), AUC by rank statistic with half credit for ties, AP by
/// precision-weighted recall increments over descending score groups.
pub fn classifier_metrics(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<ConfusionReport> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Config(format!(
            "metrics need matching nonempty scores/labels, got {}/{}",
            scores.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = scores.len();
    let p_total = tp + fn_;
    let n_total = fp + tn;

    let (auc, ap) = if p_total == 0 || n_total == 0 {
        (None, None)
    } else {
        (
            Some(rank_auc(scores, labels, p_total, n_total)),
            Some(average_precision(scores, labels, p_total)),
        )
    };

    Ok(ConfusionReport {
        tp,
        fp,
        tn,
        fn_,
        accuracy: (tp + tn) as f64 / n as f64,
        sensitivity: ratio(tp, p_total),
        specificity: ratio(tn, n_total),
        ppv: ratio(tp, tp + fp),
        npv: ratio(tn, tn + fn_),
        auc,
        ap,
    })
}

/// Mann–Whitney AUC via average ranks (ties get half credit), computed
/// without visiting pairs.
fn rank_auc(scores: &[f64], labels: &[bool], p_total: usize, n_total: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank over the tie group [i, j]
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = p_total as f64;
    (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n_total as f64)
}

/// AP over descending-score groups: after each group, precision at that
/// cut weighted by the recall gained in the group.
fn average_precision(scores: &[f64], labels: &[bool], p_total: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let mut tp_cum = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let group_tp = order[i..=j].iter().filter(|&&k| labels[k]).count();
        let prev_tp = tp_cum;
        tp_cum += group_tp;
        seen += j - i + 1;
        if group_tp > 0 {
            let precision = tp_cum as f64 / seen as f64;
            let recall_gain = (tp_cum - prev_tp) as f64 / p_total as f64;
            ap += precision * recall_gain;
        }
        i = j + 1;
    }
    ap
}

/// Fraction of generated images whose oracle-detected lesion presence
/// matches the requested class.
pub fn class_consistency(
    images: &[Tensor],
    requested: &[bool],
    cfg: &PhantomConfig,
) -> Result<f64> {
    if images.len() != requested.len() || images.is_empty() {
        return Err(Error::Config(
            "class consistency needs matching nonempty images/labels".to_string(),
        ));
    }
    let hits = images
        .iter()
        .zip(requested)
        .filter(|(img, &want)| oracle_detect(img, cfg) == want)
        .count();
    Ok(hits as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_phantom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_ranking() {
        let r = classifier_metrics(
            &[0.9, 0.8, 0.3, 0.2],
            &[true, true, false, false],
            DECISION_THRESHOLD,
        )
        .unwrap();
        assert_eq!(r.auc, Some(1.0));
        assert_eq!(r.ap, Some(1.0));
        assert_eq!(r.accuracy, 1.0);
        assert_eq!((r.tp, r.fp, r.tn, r.fn_), (2, 0, 2, 0));
    }

    #[test]
    fn all_equal_scores_give_half_auc() {
        let r = classifier_metrics(
            &[0.5, 0.5, 0.5, 0.5],
            &[true, false, true, false],
            DECISION_THRESHOLD,
        )
        .unwrap();
        assert_eq!(r.auc, Some(0.5));
    }

    #[test]
    fn hand_counted_confusion() {
        // TP=2, FP=1, FN=1, TN=2
        let scores = [0.9, 0.8, 0.7, 0.3, 0.2, 0.1];
        let labels = [true, true, false, true, false, false];
        let r = classifier_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.tn, r.fn_), (2, 1, 2, 1));
        assert!((r.accuracy - 4.0 / 6.0).abs() < 1e-12);
        assert!((r.sensitivity.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.specificity.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.ppv.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.npv.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_reports_no_auc_or_ap() {
        let r = classifier_metrics(&[0.9, 0.1], &[true, true], 0.5).unwrap();
        assert!(r.auc.is_none() && r.ap.is_none());
        assert!(r.specificity.is_none());
    }

    /// Brute-force pairwise/counting oracle for AUC and AP.
    fn oracle_auc_ap(scores: &[f64], labels: &[bool]) -> (f64, f64) {
        let mut pairs = 0.0;
        let mut credit = 0.0;
        for (i, (&sp, &lp)) in scores.iter().zip(labels).enumerate() {
            if !lp {
                continue;
            }
            for (j, (&sn, &ln)) in scores.iter().zip(labels).enumerate() {
                if ln || i == j && false {
                    continue;
                }
                pairs += 1.0;
                if sp > sn {
                    credit += 1.0;
                } else if sp == sn {
                    credit += 0.5;
                }
            }
        }
        let auc = credit / pairs;

        // AP: iterate distinct thresholds descending, recount from scratch
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let p_total = labels.iter().filter(|&&l| l).count() as f64;
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for &t in &thresholds {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(&s, &l)| s >= t && l)
                .count() as f64;
            let predicted = scores.iter().filter(|&&s| s >= t).count() as f64;
            let precision = tp / predicted;
            let recall = tp / p_total;
            if recall > prev_recall {
                ap += precision * (recall - prev_recall);
            }
            prev_recall = recall;
        }
        (auc, ap)
    }

    #[test]
    fn auc_ap_match_brute_force_oracle_on_200_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..200 {
            let n = rng.gen_range(4..40usize);
            // quantized scores so ties actually happen
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..10) as f64) / 10.0)
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            // ensure both classes present
            labels[0] = true;
            labels[n - 1] = false;

            let r = classifier_metrics(&scores, &labels, 0.5).unwrap();
            let (auc, ap) = oracle_auc_ap(&scores, &labels);
            assert!(
                (r.auc.unwrap() - auc).abs() < 1e-12,
                "trial {trial}: auc {} vs {auc}",
                r.auc.unwrap()
            );
            assert!(
                (r.ap.unwrap() - ap).abs() < 1e-12,
                "trial {trial}: ap {} vs {ap}",
                r.ap.unwrap()
            );
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scores: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut labels: Vec<bool> = (0..30).map(|_| rng.gen()).collect();
        labels[0] = true;
        labels[1] = false;
        let a = classifier_metrics(&scores, &labels, 0.5).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp()).collect();
        let b = classifier_metrics(&transformed, &labels, 0.5).unwrap();
        assert!((a.auc.unwrap() - b.auc.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scores: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..50).map(|_| rng.gen()).collect();
        let r = classifier_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!(
            r.accuracy,
            (r.tp + r.tn) as f64 / (r.tp + r.tn + r.fp + r.fn_) as f64
        );
    }

    #[test]
    fn consistency_on_real_phantoms_is_high() {
        let cfg = PhantomConfig::default();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for seed in 0..200u64 {
            let s = generate_phantom(&cfg, seed, 0.5);
            images.push(s.image);
            labels.push(s.label);
        }
        let c = class_consistency(&images, &labels, &cfg).unwrap();
        assert!(c >= 0.99, "consistency {c}");
    }
}
