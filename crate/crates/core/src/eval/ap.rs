//! COCO-style average precision with 101-point interpolation.

use serde::{Deserialize, Serialize};

use super::decode::Detection;
use crate::geometry::iou;
use crate::train::GroundTruth;

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub num_gt: usize,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    pub per_class: Vec<ClassAp>,
}

/// Per-detection true-positive flags for one class at one threshold, with
/// detections visited by descending score (ties by image, then by position
/// in the image's list). Each detection claims the unmatched gt of its class
/// with the highest IoU, provided that IoU is at least `thr`.
fn match_class(dets: &[Vec<Detection>], gts: &[GroundTruth], class: usize, thr: f64) -> Vec<bool> {
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, d)| {
            d.iter()
                .enumerate()
                .filter(|(_, x)| x.class_id == class)
                .map(move |(k, _)| (img, k))
        })
        .collect();
    order.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score).then(a.cmp(b)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(order.len());
    for (img, k) in order {
        let d = &dets[img][k];
        let mut best: Option<(usize, f64)> = None;
        for (g, (b, &label)) in gts[img].boxes.iter().zip(&gts[img].labels).enumerate() {
            if label != class || used[img][g] {
                continue;
            }
            let v = iou(&d.bbox, b);
            if v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                used[img][g] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    tp
}

/// 101-point interpolated AP from score-ordered TP flags.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP of one class at one threshold, `None` if the class has no gts.
pub fn class_ap(dets: &[Vec<Detection>], gts: &[GroundTruth], class: usize, thr: f64) -> Option<f64> {
    let num_gt = gts.iter().flat_map(|g| &g.labels).filter(|&&l| l == class).count();
    if num_gt == 0 {
        return None;
    }
    Some(interpolated_ap(&match_class(dets, gts, class, thr), num_gt))
}

/// AP, AP50 and AP75 per class and averaged over classes that have gts.
/// `dets[i]` and `gts[i]` belong to image `i`.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[GroundTruth], classes: usize) -> ApReport {
    let thresholds = coco_thresholds();
    let mut per_class = Vec::new();
    for c in 0..classes {
        let num_gt = gts.iter().flat_map(|g| &g.labels).filter(|&&l| l == c).count();
        if num_gt == 0 {
            continue;
        }
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&t| class_ap(dets, gts, c, t).expect("class has gts"))
            .collect();
        per_class.push(ClassAp {
            class_id: c,
            num_gt,
            ap: aps.iter().sum::<f64>() / aps.len() as f64,
            ap50: aps[0],
            ap75: aps[5],
        });
    }
    let mean = |f: fn(&ClassAp) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    ApReport {
        ap: mean(|c| c.ap),
        ap50: mean(|c| c.ap50),
        ap75: mean(|c| c.ap75),
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn det(b: BBox, c: usize, s: f64) -> Detection {
        Detection {
            bbox: b,
            class_id: c,
            score: s,
        }
    }

    #[test]
    fn perfect_single_detection() {
        let gt = GroundTruth::new(vec![BBox::new(0.0, 0.0, 10.0, 10.0)], vec![0]).unwrap();
        // IoU 0.9
        let d = det(BBox::new(0.0, 0.0, 10.0, 9.0), 0, 0.8);
        let dets = vec![vec![d]];
        for t in coco_thresholds() {
            let ap = class_ap(&dets, std::slice::from_ref(&gt), 0, t).unwrap();
            if t <= 0.9 + 1e-12 {
                assert_eq!(ap, 1.0, "thr {t}");
            } else {
                assert_eq!(ap, 0.0);
            }
        }
    }

    #[test]
    fn low_overlap_misses_ap50() {
        let gt = GroundTruth::new(vec![BBox::new(0.0, 0.0, 10.0, 10.0)], vec![0]).unwrap();
        let d = det(BBox::new(0.0, 0.0, 4.0, 10.0), 0, 0.8);
        let r = average_precision(&[vec![d]], &[gt], 1);
        assert_eq!(r.ap50, 0.0);
    }

    #[test]
    fn classes_without_gts_are_excluded() {
        let gt = GroundTruth::new(vec![BBox::new(0.0, 0.0, 10.0, 10.0)], vec![1]).unwrap();
        let d = det(BBox::new(0.0, 0.0, 10.0, 10.0), 1, 0.8);
        let stray = det(BBox::new(20.0, 20.0, 30.0, 30.0), 0, 0.9);
        let r = average_precision(&[vec![d, stray]], &[gt], 3);
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.ap, 1.0);
    }

    #[test]
    fn half_recall_with_leading_false_positive() {
        // FP (0.9), TP (0.8); 2 gts: precision at recall 0.5 is 0.5
        let gt = GroundTruth::new(
            vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 0.0, 30.0, 10.0)],
            vec![0, 0],
        )
        .unwrap();
        let dets = vec![vec![
            det(BBox::new(40.0, 40.0, 50.0, 50.0), 0, 0.9),
            det(BBox::new(0.0, 0.0, 10.0, 10.0), 0, 0.8),
        ]];
        let ap = class_ap(&dets, &[gt], 0, 0.5).unwrap();
        assert!((ap - 0.5 * 51.0 / 101.0).abs() < 1e-12);
    }
}
