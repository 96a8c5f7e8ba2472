//! JSONL detection/ground-truth files and on-disk scene datasets.
//!
//! A dataset directory holds `images/<id>.ppm` (six-digit ids) and
//! `gt.jsonl` with one `{image_id, class_id, box}` object per object.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ap::ApReport;
use super::decode::Detection;
use crate::analysis::render::{read_ppm, write_ppm};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;
use crate::train::{GroundTruth, Scene};

pub const GT_FILE: &str = "gt.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: usize,
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub image_id: usize,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

fn write_jsonl<T: Serialize, W: Write>(mut out: W, items: impl IntoIterator<Item = T>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", k + 1)))?);
    }
    Ok(out)
}

pub fn detection_records(dets: &[Vec<Detection>], ids: &[usize]) -> Vec<DetectionRecord> {
    dets.iter()
        .zip(ids)
        .flat_map(|(d, &image_id)| {
            d.iter().map(move |x| DetectionRecord {
                image_id,
                class_id: x.class_id,
                score: x.score,
                bbox: x.bbox.to_array(),
            })
        })
        .collect()
}

pub fn write_detections<W: Write>(out: W, dets: &[Vec<Detection>], ids: &[usize]) -> Result<()> {
    write_jsonl(out, detection_records(dets, ids))
}

pub fn read_detections<R: BufRead>(input: R) -> Result<Vec<DetectionRecord>> {
    read_jsonl(input)
}

pub fn write_ground_truth<W: Write>(out: W, gts: &[GroundTruth], ids: &[usize]) -> Result<()> {
    let records = gts.iter().zip(ids).flat_map(|(g, &image_id)| {
        g.boxes.iter().zip(&g.labels).map(move |(b, &class_id)| GtRecord {
            image_id,
            class_id,
            bbox: b.to_array(),
        })
    });
    write_jsonl(out, records)
}

pub fn read_ground_truth<R: BufRead>(input: R) -> Result<Vec<GtRecord>> {
    read_jsonl(input)
}

/// Groups records by image id into per-image lists for the given ids.
pub fn group_ground_truth(records: &[GtRecord], ids: &[usize]) -> Vec<GroundTruth> {
    let mut map: BTreeMap<usize, GroundTruth> = BTreeMap::new();
    for r in records {
        let g = map.entry(r.image_id).or_default();
        g.boxes.push(BBox::from_array(r.bbox));
        g.labels.push(r.class_id);
    }
    ids.iter().map(|id| map.remove(id).unwrap_or_default()).collect()
}

pub fn group_detections(records: &[DetectionRecord], ids: &[usize]) -> Vec<Vec<Detection>> {
    let mut map: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for r in records {
        map.entry(r.image_id).or_default().push(Detection {
            bbox: BBox::from_array(r.bbox),
            class_id: r.class_id,
            score: r.score,
        });
    }
    ids.iter().map(|id| map.remove(id).unwrap_or_default()).collect()
}

pub fn write_report(path: &Path, report: &ApReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<usize>,
    pub images: Vec<Tensor>,
    pub gts: Vec<GroundTruth>,
}

pub fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(IMAGE_DIR).join(format!("{id:06}.ppm"))
}

pub fn save_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir.join(IMAGE_DIR))?;
    for (id, s) in scenes.iter().enumerate() {
        write_ppm(&image_path(dir, id), &s.image)?;
    }
    let ids: Vec<usize> = (0..scenes.len()).collect();
    let gts: Vec<GroundTruth> = scenes.iter().map(|s| s.gt.clone()).collect();
    let file = std::fs::File::create(dir.join(GT_FILE))?;
    write_ground_truth(std::io::BufWriter::new(file), &gts, &ids)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir.join(IMAGE_DIR))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ppm") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let id: usize = stem
            .parse()
            .map_err(|_| Error::Parse(format!("image file name `{}` is not a numeric id", path.display())))?;
        ids.push(id);
    }
    ids.sort_unstable();
    let images = ids
        .iter()
        .map(|&id| read_ppm(&image_path(dir, id)))
        .collect::<Result<Vec<_>>>()?;
    let gt_file = std::fs::File::open(dir.join(GT_FILE))?;
    let records = read_ground_truth(std::io::BufReader::new(gt_file))?;
    let gts = group_ground_truth(&records, &ids);
    Ok(Dataset { ids, images, gts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{generate_scene, SceneConfig};

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let scenes: Vec<Scene> = (0..4).map(|s| generate_scene(s, &SceneConfig::default()).unwrap()).collect();
        save_dataset(dir.path(), &scenes).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.ids, vec![0, 1, 2, 3]);
        for (s, (img, gt)) in scenes.iter().zip(ds.images.iter().zip(&ds.gts)) {
            assert_eq!(&s.image, img);
            assert_eq!(&s.gt, gt);
        }
    }

    #[test]
    fn detection_jsonl_shape() {
        let d = Detection {
            bbox: BBox::new(1.0, 2.0, 3.0, 4.0),
            class_id: 2,
            score: 0.5,
        };
        let mut buf = Vec::new();
        write_detections(&mut buf, &[vec![d]], &[7]).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(line, "{\"image_id\":7,\"class_id\":2,\"score\":0.5,\"box\":[1.0,2.0,3.0,4.0]}\n");
        let back = group_detections(&read_detections(&buf[..]).unwrap(), &[7]);
        assert_eq!(back, vec![vec![d]]);
    }

    #[test]
    fn bad_json_line_is_reported() {
        let err = read_ground_truth(&b"{\"image_id\":0,\"class_id\":0,\"box\":[0,0,1,1]}\nnot json\n"[..]).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
