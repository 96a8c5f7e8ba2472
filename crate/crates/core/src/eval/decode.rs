//! Turning collected per-grid predictions into detections.

use serde::{Deserialize, Serialize};

use super::nms::nms;
use crate::error::Result;
use crate::geometry::{clamp_box, BBox};
use crate::model::{Detector, HeadOutput};
use crate::tensor::Tensor;
use crate::train::loss::sort_box;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub score_thresh: f64,
    pub topk_per_level: usize,
    pub max_per_image: usize,
    pub nms_iou: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            score_thresh: 0.05,
            topk_per_level: 1000,
            max_per_image: 100,
            nms_iou: 0.6,
        }
    }
}

/// Per level, keeps grid-class pairs scoring above `score_thresh`, at most
/// `topk` of them by score (ties by grid then class order), with boxes
/// axis-sorted and clamped to the image. Levels are concatenated in order.
pub fn decode_detections(out: &HeadOutput, score_thresh: f64, topk: usize) -> Vec<Detection> {
    let n_levels = out.maps.len();
    let mut per_level: Vec<Vec<Detection>> = vec![Vec::new(); n_levels];
    for g in &out.grids {
        let (sorted, _, _) = sort_box(&g.bbox);
        let bbox = clamp_box(&sorted, out.image_width as f64, out.image_height as f64);
        for (c, s) in g.scores().into_iter().enumerate() {
            if s > score_thresh {
                per_level[g.grid.level].push(Detection {
                    bbox,
                    class_id: c,
                    score: s,
                });
            }
        }
    }
    let mut all = Vec::new();
    for mut dets in per_level {
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(topk);
        all.extend(dets);
    }
    all
}

/// Full inference for one image: decode, class-wise NMS, cap.
pub fn postprocess(out: &HeadOutput, p: &DecodeParams) -> Vec<Detection> {
    let mut kept = nms(&decode_detections(out, p.score_thresh, p.topk_per_level), p.nms_iou);
    kept.truncate(p.max_per_image);
    kept
}

pub fn detect(det: &Detector, image: &Tensor, p: &DecodeParams) -> Result<Vec<Detection>> {
    Ok(postprocess(&det.predict(image)?, p))
}
