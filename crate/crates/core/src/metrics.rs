// SPDX-License-Identifier: Apache-2.0

//! Classification and grounding metrics.

use crate::error::{Error, Result};
use crate::image::Heatmap;

/// Rank-based ROC AUC; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of average ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdScore {
    pub f1: f64,
    pub acc: f64,
    pub threshold: f64,
}

/// F1 and accuracy of `score >= threshold`.
pub fn f1_acc_at(scores: &[f64], labels: &[bool], threshold: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut fne, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => tn += 1,
        }
    }
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fne) as f64
    };
    (f1, (tp + tn) as f64 / scores.len() as f64)
}

/// Candidate thresholds: below the minimum, midpoints between consecutive
/// distinct scores, above the maximum. Ascending.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = scores.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut out = Vec::with_capacity(u.len() + 1);
    out.push(u[0] - 1.0);
    for w in u.windows(2) {
        out.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    out.push(u[u.len() - 1] + 1.0);
    out
}

/// Threshold maximising F1 over [`candidate_thresholds`]; ties go to the
/// lower threshold.
pub fn f1_acc_at_best_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdScore> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Invalid("need equal, non-empty scores and labels".into()));
    }
    let mut best: Option<ThresholdScore> = None;
    for t in candidate_thresholds(scores) {
        let (f1, acc) = f1_acc_at(scores, labels, t);
        if best.is_none_or(|b| f1 > b.f1) {
            best = Some(ThresholdScore {
                f1,
                acc,
                threshold: t,
            });
        }
    }
    Ok(best.expect("at least two candidates"))
}

/// Whether the heatmap's argmax pixel (lowest index on ties) is in `mask`.
pub fn pointing_game(heatmap: &Heatmap, mask: &[bool]) -> Result<bool> {
    if heatmap.values.len() != mask.len() {
        return Err(Error::Invalid("heatmap and mask differ in size".into()));
    }
    if !mask.contains(&true) {
        return Err(Error::Invalid("pointing game needs a non-empty mask".into()));
    }
    Ok(mask[heatmap.argmax()])
}

/// Dice and IoU of two binary masks; both empty counts as perfect.
pub fn dice_iou(pred: &[bool], mask: &[bool]) -> (f64, f64) {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &m) in pred.iter().zip(mask) {
        inter += (p && m) as usize;
        a += p as usize;
        b += m as usize;
    }
    if a + b == 0 {
        return (1.0, 1.0);
    }
    let union = a + b - inter;
    (
        2.0 * inter as f64 / (a + b) as f64,
        inter as f64 / union as f64,
    )
}

/// Thresholds `0.00, 0.01, …, 1.00`.
pub fn segmentation_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

pub fn binarize(values: &[f64], threshold: f64) -> Vec<bool> {
    values.iter().map(|&v| v >= threshold).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentationScore {
    pub dice: f64,
    pub iou: f64,
    pub threshold: f64,
}

/// Dice-maximising threshold over [`segmentation_thresholds`] (ties to the
/// lowest) and its Dice and IoU.
pub fn dice_iou_best_threshold(heatmap: &Heatmap, mask: &[bool]) -> Result<SegmentationScore> {
    if heatmap.values.len() != mask.len() {
        return Err(Error::Invalid("heatmap and mask differ in size".into()));
    }
    let mut best: Option<SegmentationScore> = None;
    for t in segmentation_thresholds() {
        let (dice, iou) = dice_iou(&binarize(&heatmap.values, t), mask);
        if best.is_none_or(|b| dice > b.dice) {
            best = Some(SegmentationScore {
                dice,
                iou,
                threshold: t,
            });
        }
    }
    Ok(best.expect("101 thresholds"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionScore {
    pub precision: f64,
    pub recall: f64,
}

/// Instance-level detection over positive instances. A non-empty
/// prediction is a detection; it is correct when its IoU with the mask
/// reaches `iou_threshold`. Precision is 0 when nothing is detected.
pub fn detection_pr(
    predictions: &[Vec<bool>],
    masks: &[Vec<bool>],
    iou_threshold: f64,
) -> Result<DetectionScore> {
    if predictions.len() != masks.len() {
        return Err(Error::Invalid("predictions and masks differ in count".into()));
    }
    let (mut tp, mut detected) = (0usize, 0usize);
    for (p, m) in predictions.iter().zip(masks) {
        if p.len() != m.len() {
            return Err(Error::Invalid("prediction and mask differ in size".into()));
        }
        if p.contains(&true) {
            detected += 1;
            if dice_iou(p, m).1 >= iou_threshold {
                tp += 1;
            }
        }
    }
    Ok(DetectionScore {
        precision: if detected == 0 {
            0.0
        } else {
            tp as f64 / detected as f64
        },
        recall: if masks.is_empty() {
            0.0
        } else {
            tp as f64 / masks.len() as f64
        },
    })
}

/// Detection over heatmaps, each binarised at its own Dice-best threshold.
pub fn detection_pr_from_heatmaps(
    heatmaps: &[Heatmap],
    masks: &[Vec<bool>],
    iou_threshold: f64,
) -> Result<DetectionScore> {
    let preds = heatmaps
        .iter()
        .zip(masks)
        .map(|(h, m)| {
            let best = dice_iou_best_threshold(h, m)?;
            Ok(binarize(&h.values, best.threshold))
        })
        .collect::<Result<Vec<_>>>()?;
    detection_pr(&preds, masks, iou_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hm(values: Vec<f64>) -> Heatmap {
        Heatmap {
            height: 1,
            width: values.len(),
            values,
        }
    }

    #[test]
    fn auc_basics() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn f1_basics() {
        let r = f1_acc_at_best_threshold(&[0.9, 0.1], &[true, false]).unwrap();
        assert_eq!((r.f1, r.acc), (1.0, 1.0));
        let r = f1_acc_at_best_threshold(&[0.3, 0.7, 0.5], &[true; 3]).unwrap();
        assert_eq!(r.f1, 1.0);
        assert!(r.threshold < 0.3);
    }

    #[test]
    fn pointing_basics() {
        let h = hm(vec![0.0, 1.0, 0.0]);
        assert!(pointing_game(&h, &[true; 3]).unwrap());
        assert!(!pointing_game(&h, &[true, false, true]).unwrap());
        assert!(pointing_game(&h, &[false; 3]).is_err());
    }

    #[test]
    fn dice_basics() {
        let mask = vec![false, true, true, false];
        let h = hm(vec![0.0, 1.0, 1.0, 0.0]);
        let s = dice_iou_best_threshold(&h, &mask).unwrap();
        assert_eq!((s.dice, s.iou), (1.0, 1.0));
        assert_eq!(s.threshold, 0.01);
        let disjoint = hm(vec![1.0, 0.0, 0.0, 0.0]);
        // threshold 0 selects everything, so dice is positive there; above
        // it the prediction is disjoint from the mask
        let s = dice_iou_best_threshold(&disjoint, &mask).unwrap();
        assert_eq!(s.threshold, 0.0);
        assert_eq!(dice_iou(&binarize(&disjoint.values, 0.5), &mask), (0.0, 0.0));
        assert_eq!(dice_iou(&[false; 3], &[false; 3]), (1.0, 1.0));
        // a prediction that is never empty against an empty mask
        let s = dice_iou_best_threshold(&hm(vec![1.0; 4]), &[false; 4]).unwrap();
        assert_eq!((s.dice, s.iou), (0.0, 0.0));
    }

    #[test]
    fn detection_conventions() {
        let masks = vec![vec![true, false], vec![false, true]];
        let r = detection_pr(&masks, &masks, 0.1).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 1.0));
        let empty = vec![vec![false; 2]; 2];
        let r = detection_pr(&empty, &masks, 0.1).unwrap();
        assert_eq!((r.precision, r.recall), (0.0, 0.0));
    }
}
