//! Class-wise greedy non-maximum suppression.

use super::decode::Detection;
use crate::geometry::iou;

/// Visits detections by descending score (ties by input order), keeping each
/// one not suppressed yet and suppressing later same-class detections whose
/// IoU with it exceeds `iou_thresh`. Returns kept detections in visit order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && dets[j].class_id == dets[i].class_id && iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}
