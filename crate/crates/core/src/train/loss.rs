//! Focal classification loss, GIoU regression losses and their per-grid
//! gradients.

use serde::{Deserialize, Serialize};

use super::assign::{assign_samples, Assignment, GroundTruth};
use crate::geometry::{giou_loss_grad, BBox};
use crate::head::GridGrad;
use crate::model::HeadOutput;
use crate::tensor::activation::{log_sigmoid, sigmoid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub focal: FocalParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 2.0,
            lambda2: 0.5,
            focal: FocalParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_reg2: f64,
    pub total: f64,
}

pub fn total_loss(l_cls: f64, l_reg: f64, l_reg2: f64, lambda1: f64, lambda2: f64) -> f64 {
    l_cls + lambda1 * l_reg + lambda2 * l_reg2
}

/// Focal loss of one probability against a binary target.
pub fn focal_prob(p: f64, positive: bool, fp: FocalParams) -> f64 {
    let (pt, at) = if positive { (p, fp.alpha) } else { (1.0 - p, 1.0 - fp.alpha) };
    if pt == 1.0 {
        return 0.0;
    }
    -at * (1.0 - pt).powf(fp.gamma) * pt.ln()
}

/// Focal loss over per-grid class scores, normalized by `max(1, #positives)`.
/// `targets[k]` is the class of grid `k` or `None` for background.
pub fn focal_loss(scores: &[Vec<f64>], targets: &[Option<usize>], fp: FocalParams) -> f64 {
    let mut sum = 0.0;
    for (s, t) in scores.iter().zip(targets) {
        for (c, &p) in s.iter().enumerate() {
            sum += focal_prob(p, *t == Some(c), fp);
        }
    }
    let positives = targets.iter().filter(|t| t.is_some()).count();
    sum / positives.max(1) as f64
}

/// Focal loss of a logit and its derivative, computed in log space.
pub fn focal_logit(z: f64, positive: bool, fp: FocalParams) -> (f64, f64) {
    let (a, g) = (fp.alpha, fp.gamma);
    let p = sigmoid(z);
    let q = sigmoid(-z);
    if positive {
        let lp = log_sigmoid(z);
        let qg = q.powf(g);
        (-a * qg * lp, a * g * qg * p * lp - a * qg * q)
    } else {
        let lq = log_sigmoid(-z);
        let pg = p.powf(g);
        (-(1.0 - a) * pg * lq, (1.0 - a) * (pg * p - g * pg * q * lq))
    }
}

/// Axis-sorted copy of a possibly inverted box, with the swaps performed.
pub fn sort_box(b: &BBox) -> (BBox, bool, bool) {
    let sx = b.l > b.r;
    let sy = b.t > b.b;
    let (l, r) = if sx { (b.r, b.l) } else { (b.l, b.r) };
    let (t, bb) = if sy { (b.b, b.t) } else { (b.t, b.b) };
    (BBox::new(l, t, r, bb), sx, sy)
}

fn unsort_grad(mut g: [f64; 4], sx: bool, sy: bool) -> [f64; 4] {
    if sx {
        g.swap(0, 2);
    }
    if sy {
        g.swap(1, 3);
    }
    g
}

/// GIoU loss of a predicted (possibly inverted) box and its gradient.
pub fn box_loss(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let (sorted, sx, sy) = sort_box(pred);
    let (l, g, _) = giou_loss_grad(&sorted, gt);
    (l, unsort_grad(g, sx, sy))
}

/// Un-normalized loss sums of one image together with un-normalized
/// per-grid gradients.
#[derive(Clone, Debug)]
pub struct ImageLoss {
    pub cls_sum: f64,
    pub reg_sum: f64,
    pub reg2_sum: f64,
    pub positives: usize,
    pub gts: usize,
    pub grads: Vec<GridGrad>,
    pub assignment: Assignment,
}

pub fn image_loss(out: &HeadOutput, gt: &GroundTruth, fp: FocalParams) -> ImageLoss {
    let assignment = assign_samples(&out.grids, gt);
    let classes = out.grids.first().map_or(0, |g| g.logits.len());
    let mut grads = vec![GridGrad::zeros(classes); out.grids.len()];
    let mut cls_sum = 0.0;
    for (k, pred) in out.grids.iter().enumerate() {
        let target = assignment.targets[k].map(|g| gt.labels[g]);
        for (c, &z) in pred.logits.iter().enumerate() {
            let (l, dz) = focal_logit(z, target == Some(c), fp);
            cls_sum += l;
            grads[k].logits[c] = dz;
        }
    }
    let mut reg_sum = 0.0;
    for p in &assignment.positives {
        let (l, g) = box_loss(&out.grids[p.cell].bbox, &gt.boxes[p.gt]);
        reg_sum += l;
        grads[p.cell].bbox = g;
    }
    let mut reg2_sum = 0.0;
    for m in &assignment.center_matches {
        let (l, g, _) = giou_loss_grad(&out.grids[m.cell].points.coarse, &gt.boxes[m.gt]);
        reg2_sum += l;
        for k in 0..4 {
            grads[m.cell].coarse[k] += g[k];
        }
    }
    ImageLoss {
        cls_sum,
        reg_sum,
        reg2_sum,
        positives: assignment.positives.len(),
        gts: gt.len(),
        grads,
        assignment,
    }
}

/// Normalizes a batch of image losses in place: classification by the total
/// positive count (at least 1), final-box regression by the positive count
/// and coarse-box regression by the gt count. Gradients are scaled so they
/// are gradients of the returned total.
pub fn normalize_batch(images: &mut [ImageLoss], cfg: &LossConfig) -> LossTerms {
    let positives: usize = images.iter().map(|i| i.positives).sum();
    let gts: usize = images.iter().map(|i| i.gts).sum();
    let cls_norm = 1.0 / positives.max(1) as f64;
    let reg_norm = if positives > 0 { 1.0 / positives as f64 } else { 0.0 };
    let reg2_norm = if gts > 0 { 1.0 / gts as f64 } else { 0.0 };
    let mut terms = LossTerms::default();
    for img in images.iter_mut() {
        terms.l_cls += img.cls_sum * cls_norm;
        terms.l_reg += img.reg_sum * reg_norm;
        terms.l_reg2 += img.reg2_sum * reg2_norm;
        for g in &mut img.grads {
            g.logits.iter_mut().for_each(|v| *v *= cls_norm);
            g.bbox.iter_mut().for_each(|v| *v *= cfg.lambda1 * reg_norm);
            g.coarse.iter_mut().for_each(|v| *v *= cfg.lambda2 * reg2_norm);
        }
    }
    terms.total = total_loss(terms.l_cls, terms.l_reg, terms.l_reg2, cfg.lambda1, cfg.lambda2);
    terms
}

/// Loss terms and per-grid gradients of a single image.
pub fn detection_loss(out: &HeadOutput, gt: &GroundTruth, cfg: &LossConfig) -> (LossTerms, ImageLoss) {
    let mut img = [image_loss(out, gt, cfg.focal)];
    let terms = normalize_batch(&mut img, cfg);
    let [img] = img;
    (terms, img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 2.0, 0.5), 0.0);
        assert!((total_loss(1.0, 0.5, 0.2, 2.0, 0.5) - 2.1).abs() < 1e-15);
    }

    #[test]
    fn focal_examples() {
        let fp = FocalParams::default();
        assert_eq!(focal_prob(1.0, true, fp), 0.0);
        assert_eq!(focal_prob(0.0, false, fp), 0.0);
        let v = focal_prob(0.9, true, fp);
        assert!((v - 0.25 * 0.01 * -(0.9f64.ln())).abs() < 1e-15);
        assert!((v - 2.634e-4).abs() < 1e-7);
    }

    #[test]
    fn focal_normalizes_by_positive_count() {
        let fp = FocalParams::default();
        let scores = vec![vec![0.9, 0.2], vec![0.3, 0.6], vec![0.5, 0.5]];
        let targets = vec![Some(0), Some(1), None];
        let mut direct = 0.0;
        for (k, s) in scores.iter().enumerate() {
            for (c, &p) in s.iter().enumerate() {
                let y = targets[k] == Some(c);
                let (pt, at) = if y { (p, 0.25) } else { (1.0 - p, 0.75) };
                direct += -at * (1.0 - pt) * (1.0 - pt) * f64::ln(pt);
            }
        }
        assert!((focal_loss(&scores, &targets, fp) - direct / 2.0).abs() < 1e-15);
        // no positives: normalizer is 1
        let none = vec![None; 3];
        let sum: f64 = scores.iter().flatten().map(|&p| focal_prob(p, false, fp)).sum();
        assert!((focal_loss(&scores, &none, fp) - sum).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn gamma_zero_is_weighted_cross_entropy(p in 0.001f64..0.999, a in 0.05f64..0.95, y: bool) {
            let fp = FocalParams { alpha: a, gamma: 0.0 };
            let want = if y { -a * p.ln() } else { -(1.0 - a) * (1.0 - p).ln() };
            prop_assert!((focal_prob(p, y, fp) - want).abs() < 1e-12);
        }

        #[test]
        fn logit_and_probability_forms_agree(z in -15.0f64..15.0, y: bool) {
            let fp = FocalParams::default();
            let (l, _) = focal_logit(z, y, fp);
            let want = focal_prob(sigmoid(z), y, fp);
            prop_assert!((l - want).abs() <= 1e-10 * want.abs().max(1e-6));
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn focal_logit_gradient(z in -12.0f64..12.0, y: bool, g in 0.0f64..3.0) {
            let fp = FocalParams { alpha: 0.25, gamma: g };
            let (_, d) = focal_logit(z, y, fp);
            let e = 1e-5;
            let n = (focal_logit(z + e, y, fp).0 - focal_logit(z - e, y, fp).0) / (2.0 * e);
            prop_assert!((d - n).abs() / d.abs().max(n.abs()).max(1e-6) < 1e-5, "{} vs {}", d, n);
        }

        #[test]
        fn sorted_box_gradient(l in 0.0f64..20.0, t in 0.0f64..20.0, w in -15.0f64..15.0, h in -15.0f64..15.0) {
            prop_assume!(w.abs() > 0.5 && h.abs() > 0.5);
            let gt = BBox::new(3.0, 4.0, 17.0, 13.0);
            let pred = BBox::new(l, t, l + w, t + h);
            let (_, g) = box_loss(&pred, &gt);
            let e = 1e-6;
            for k in 0..4 {
                let mut p = pred.to_array();
                let mut m = p;
                p[k] += e;
                m[k] -= e;
                let n = (box_loss(&BBox::from_array(p), &gt).0 - box_loss(&BBox::from_array(m), &gt).0) / (2.0 * e);
                prop_assert!((g[k] - n).abs() < 1e-6, "side {}: {} vs {}", k, g[k], n);
            }
        }
    }
}
