//! Detection decoding, NMS, average precision and evaluation IO.

pub mod ap;
pub mod decode;
pub mod io;
pub mod nms;

pub use ap::{average_precision, ApReport, ClassAp};
pub use decode::{decode_detections, detect, postprocess, DecodeParams, Detection};
pub use nms::nms;

use crate::error::Result;
use crate::model::Detector;
use crate::tensor::Tensor;
use crate::train::GroundTruth;

/// Detections for every image with the default decode parameters, then AP.
pub fn evaluate(det: &Detector, images: &[Tensor], gts: &[GroundTruth], p: &DecodeParams) -> Result<(ApReport, Vec<Vec<Detection>>)> {
    let dets = images.iter().map(|im| detect(det, im, p)).collect::<Result<Vec<_>>>()?;
    Ok((average_precision(&dets, gts, det.config.classes), dets))
}
