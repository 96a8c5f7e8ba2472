//! Per-object accuracy maps over dense grid predictions and the statistics
//! of where each prediction target is estimated best.
//!
//! Grid coordinates are normalized corner-anchored: a grid center `(x, y)`
//! maps to `((x - l) / w, (y - t) / h)` for the object box `(l, t, r, b)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Point};
use crate::head::points::grid_center;
use crate::model::{Detector, HeadOutput};
use crate::tensor::Tensor;
use crate::train::loss::sort_box;
use crate::train::GroundTruth;

/// Target order used throughout: left, top, right, bottom, classification.
pub const TARGETS: [&str; 5] = ["l", "t", "r", "b", "c"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisParams {
    /// Analyzed pyramid level; `None` picks one per object.
    pub level: Option<usize>,
    /// Region dilation around the box, relative to its width and height.
    pub margin: f64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        AnalysisParams {
            level: None,
            margin: 0.0,
        }
    }
}

/// Extent and stride of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelGrid {
    pub height: usize,
    pub width: usize,
    pub stride: f64,
}

/// The per-grid decoded boxes and class scores of one image, level-major
/// and row-major within a level.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseView {
    pub levels: Vec<LevelGrid>,
    pub boxes: Vec<BBox>,
    pub scores: Vec<Vec<f64>>,
}

impl DenseView {
    pub fn from_output(out: &HeadOutput) -> Self {
        DenseView {
            levels: out
                .maps
                .iter()
                .map(|m| LevelGrid {
                    height: m.height(),
                    width: m.width(),
                    stride: m.stride as f64,
                })
                .collect(),
            boxes: out.grids.iter().map(|g| sort_box(&g.bbox).0).collect(),
            scores: out.grids.iter().map(|g| g.scores()).collect(),
        }
    }

    fn level_offset(&self, level: usize) -> usize {
        self.levels[..level].iter().map(|l| l.height * l.width).sum()
    }
}

/// Dense accuracy of one object at one level. Maps cover the whole level
/// grid; cells outside the analyzed region hold NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMaps {
    pub gt_index: usize,
    pub class_id: usize,
    pub gt_box: BBox,
    pub level: usize,
    pub grid: LevelGrid,
    /// Score of the gt class.
    pub cls_conf: Vec<f64>,
    /// Negated absolute error of each predicted side.
    pub inv_err: [Vec<f64>; 4],
    /// IoU of each grid's decoded box with the gt box.
    pub det_iou: Vec<f64>,
}

impl AccuracyMaps {
    pub fn target(&self, k: usize) -> &[f64] {
        if k < 4 {
            &self.inv_err[k]
        } else {
            &self.cls_conf
        }
    }

    pub fn center(&self, cell: usize) -> Point {
        grid_center(cell / self.grid.width, cell % self.grid.width, self.grid.stride)
    }

    /// Corner-anchored normalized coordinates of a cell's grid center.
    pub fn normalized(&self, cell: usize) -> (f64, f64) {
        let p = self.center(cell);
        let b = &self.gt_box;
        ((p.x - b.l) / b.width(), (p.y - b.t) / b.height())
    }

    pub fn in_region(&self, cell: usize) -> bool {
        self.cls_conf[cell].is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyAnalysis {
    pub maps: Vec<AccuracyMaps>,
    /// Gt indices without any grid in their region at the chosen level.
    pub skipped: Vec<usize>,
}

fn region_cells(grid: &LevelGrid, b: &BBox, margin: f64) -> Vec<usize> {
    let (mx, my) = (margin * b.width(), margin * b.height());
    let mut out = Vec::new();
    for i in 0..grid.height {
        for j in 0..grid.width {
            let p = grid_center(i, j, grid.stride);
            if p.x >= b.l - mx && p.x <= b.r + mx && p.y >= b.t - my && p.y <= b.b + my {
                out.push(i * grid.width + j);
            }
        }
    }
    out
}

/// Level with the most region grids whose decoded box overlaps the object
/// with IoU above 0.5, ties toward the finer level; if no grid qualifies,
/// the finest level with any region grid.
fn pick_level(view: &DenseView, b: &BBox, margin: f64) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    let mut fallback = None;
    for (level, grid) in view.levels.iter().enumerate() {
        let cells = region_cells(grid, b, margin);
        if cells.is_empty() {
            continue;
        }
        fallback.get_or_insert(level);
        let off = view.level_offset(level);
        let good = cells.iter().filter(|&&c| iou(&view.boxes[off + c], b) > 0.5).count();
        if good > 0 && best.map_or(true, |(_, n)| good > n) {
            best = Some((level, good));
        }
    }
    best.map(|(l, _)| l).or(fallback)
}

pub fn accuracy_maps_from_view(view: &DenseView, gt: &GroundTruth, params: &AnalysisParams) -> Result<AccuracyAnalysis> {
    if let Some(l) = params.level {
        if l >= view.levels.len() {
            return Err(Error::invalid(
                "compute_accuracy_maps",
                format!("level {l} out of range for {} levels", view.levels.len()),
            ));
        }
    }
    if !(params.margin >= 0.0 && params.margin.is_finite()) {
        return Err(Error::invalid("compute_accuracy_maps", format!("margin {} must be >= 0", params.margin)));
    }
    let mut maps = Vec::new();
    let mut skipped = Vec::new();
    for (g, (b, &class_id)) in gt.boxes.iter().zip(&gt.labels).enumerate() {
        let level = match params.level.or_else(|| pick_level(view, b, params.margin)) {
            Some(l) => l,
            None => {
                skipped.push(g);
                continue;
            }
        };
        let grid = view.levels[level];
        let cells = region_cells(&grid, b, params.margin);
        if cells.is_empty() {
            skipped.push(g);
            continue;
        }
        let n = grid.height * grid.width;
        let off = view.level_offset(level);
        let mut cls_conf = vec![f64::NAN; n];
        let mut inv_err = [vec![f64::NAN; n], vec![f64::NAN; n], vec![f64::NAN; n], vec![f64::NAN; n]];
        let mut det_iou = vec![f64::NAN; n];
        let truth = b.to_array();
        for c in cells {
            let pred = view.boxes[off + c];
            cls_conf[c] = view.scores[off + c][class_id];
            for (side, &v) in pred.to_array().iter().enumerate() {
                inv_err[side][c] = -(v - truth[side]).abs();
            }
            det_iou[c] = iou(&pred, b);
        }
        maps.push(AccuracyMaps {
            gt_index: g,
            class_id,
            gt_box: *b,
            level,
            grid,
            cls_conf,
            inv_err,
            det_iou,
        });
    }
    Ok(AccuracyAnalysis { maps, skipped })
}

/// Runs the model on `image` and builds the maps of every gt object.
pub fn compute_accuracy_maps(
    det: &Detector,
    image: &Tensor,
    gt: &GroundTruth,
    params: &AnalysisParams,
) -> Result<AccuracyAnalysis> {
    let out = det.predict(image)?;
    accuracy_maps_from_view(&DenseView::from_output(&out), gt, params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram2d {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    /// Row-major over (y bin, x bin).
    pub counts: Vec<u64>,
}

impl Histogram2d {
    pub fn new(bins: usize, lo: f64, hi: f64) -> Self {
        Histogram2d {
            bins,
            lo,
            hi,
            counts: vec![0; bins * bins],
        }
    }

    /// Bin of a coordinate; values outside the domain land in the edge bins.
    pub fn bin(&self, v: f64) -> usize {
        let t = ((v - self.lo) / (self.hi - self.lo) * self.bins as f64).floor();
        t.clamp(0.0, (self.bins - 1) as f64) as usize
    }

    pub fn add(&mut self, x: f64, y: f64) {
        let idx = self.bin(y) * self.bins + self.bin(x);
        self.counts[idx] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Copy mirrored left-right.
    pub fn flipped_x(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.bins {
            for x in 0..self.bins {
                out.counts[y * self.bins + x] = self.counts[y * self.bins + self.bins - 1 - x];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramParams {
    pub iou_thresh: f64,
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for HistogramParams {
    fn default() -> Self {
        HistogramParams {
            iou_thresh: 0.5,
            bins: 21,
            lo: -0.5,
            hi: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestLocationHistogram {
    /// One histogram per entry of [`TARGETS`].
    pub histograms: Vec<Histogram2d>,
    /// Normalized argmax location per analyzed object, per target.
    pub locations: Vec<Vec<(f64, f64)>>,
    pub objects: usize,
}

impl BestLocationHistogram {
    /// Per side, the fraction of best locations in the third of the box
    /// adjacent to that side (`x < 1/3` for left, `y > 2/3` for bottom, ...).
    pub fn boundary_bias(&self) -> [f64; 4] {
        let third = 1.0 / 3.0;
        let tests: [fn((f64, f64), f64) -> bool; 4] = [
            |(x, _), t| x < t,
            |(_, y), t| y < t,
            |(x, _), t| x > 1.0 - t,
            |(_, y), t| y > 1.0 - t,
        ];
        let mut out = [0.0; 4];
        for (side, test) in tests.iter().enumerate() {
            let locs = &self.locations[side];
            if !locs.is_empty() {
                out[side] = locs.iter().filter(|&&p| test(p, third)).count() as f64 / locs.len() as f64;
            }
        }
        out
    }
}

/// Argmax of each target over the grids of each object whose decoded box
/// has IoU above `iou_thresh` with it; ties keep the first cell in row-major
/// order. Objects without such a grid are not counted.
pub fn best_location_histogram(maps: &[AccuracyMaps], p: &HistogramParams) -> BestLocationHistogram {
    let mut histograms = vec![Histogram2d::new(p.bins, p.lo, p.hi); TARGETS.len()];
    let mut locations = vec![Vec::new(); TARGETS.len()];
    let mut objects = 0;
    for m in maps {
        let cells: Vec<usize> = (0..m.det_iou.len())
            .filter(|&c| m.in_region(c) && m.det_iou[c] > p.iou_thresh)
            .collect();
        if cells.is_empty() {
            continue;
        }
        objects += 1;
        for (k, (hist, locs)) in histograms.iter_mut().zip(&mut locations).enumerate() {
            let values = m.target(k);
            let best = cells
                .iter()
                .copied()
                .reduce(|a, b| if values[b] > values[a] { b } else { a })
                .expect("non-empty");
            let (x, y) = m.normalized(best);
            hist.add(x, y);
            locs.push((x, y));
        }
    }
    BestLocationHistogram {
        histograms,
        locations,
        objects,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view_with(boxes: impl Fn(Point) -> BBox, score: impl Fn(Point) -> f64) -> DenseView {
        let levels = vec![
            LevelGrid {
                height: 16,
                width: 16,
                stride: 4.0,
            },
            LevelGrid {
                height: 8,
                width: 8,
                stride: 8.0,
            },
        ];
        let mut bx = Vec::new();
        let mut sc = Vec::new();
        for l in &levels {
            for i in 0..l.height {
                for j in 0..l.width {
                    let p = grid_center(i, j, l.stride);
                    bx.push(boxes(p));
                    sc.push(vec![score(p), 0.0]);
                }
            }
        }
        DenseView {
            levels,
            boxes: bx,
            scores: sc,
        }
    }

    fn gt() -> GroundTruth {
        GroundTruth::new(vec![BBox::new(10.0, 12.0, 34.0, 28.0)], vec![0]).unwrap()
    }

    #[test]
    fn oracle_predictor_has_zero_error() {
        let g = gt();
        let view = view_with(|_| g.boxes[0], |_| 0.9);
        let a = accuracy_maps_from_view(&view, &g, &AnalysisParams::default()).unwrap();
        let m = &a.maps[0];
        assert_eq!(m.grid.height * m.grid.width, 16 * 16);
        for side in 0..4 {
            assert!(m.inv_err[side].iter().filter(|v| v.is_finite()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_offset_gives_constant_error() {
        let g = gt();
        let b = g.boxes[0];
        let view = view_with(|_| BBox::new(b.l + 2.0, b.t - 2.0, b.r + 2.0, b.b - 2.0), |_| 0.5);
        let a = accuracy_maps_from_view(&view, &g, &AnalysisParams { level: Some(0), margin: 0.5 }).unwrap();
        let m = &a.maps[0];
        let finite: Vec<f64> = m.inv_err.iter().flatten().copied().filter(|v| v.is_finite()).collect();
        assert!(!finite.is_empty());
        assert!(finite.iter().all(|&v| v == -2.0));
        assert!(m.cls_conf.iter().any(|v| v.is_nan()));
    }

    #[test]
    fn region_respects_margin() {
        let g = gt();
        let view = view_with(|_| g.boxes[0], |_| 0.9);
        let count = |margin| {
            let a = accuracy_maps_from_view(&view, &g, &AnalysisParams { level: Some(0), margin }).unwrap();
            a.maps[0].cls_conf.iter().filter(|v| v.is_finite()).count()
        };
        // centers at 2, 6, 10, ...: x in [10, 34] -> 7 (closed), y in [12, 28] -> 4
        assert_eq!(count(0.0), 28);
        assert!(count(0.5) > 28);
    }

    #[test]
    fn tiny_object_at_coarse_level_is_skipped() {
        let g = GroundTruth::new(vec![BBox::new(0.5, 0.5, 1.5, 1.5)], vec![0]).unwrap();
        let view = view_with(|_| g.boxes[0], |_| 0.9);
        let a = accuracy_maps_from_view(&view, &g, &AnalysisParams { level: Some(1), margin: 0.0 }).unwrap();
        assert!(a.maps.is_empty());
        assert_eq!(a.skipped, vec![0]);
    }

    #[test]
    fn single_object_unique_argmax() {
        let g = gt();
        let b = g.boxes[0];
        // error grows with distance from each side's own edge
        let view = view_with(
            |p| BBox::new(b.l + (p.x - b.l).abs() * 0.1, b.t, b.r, b.b),
            |p| 1.0 / (1.0 + (p.x - 22.0).abs() + (p.y - 20.0).abs()),
        );
        let a = accuracy_maps_from_view(&view, &g, &AnalysisParams { level: Some(0), margin: 0.0 }).unwrap();
        let h = best_location_histogram(&a.maps, &HistogramParams::default());
        assert_eq!(h.objects, 1);
        for hist in &h.histograms {
            assert_eq!(hist.total(), 1);
            assert_eq!(hist.counts.iter().filter(|&&c| c == 1).count(), 1);
        }
        // left edge best at the leftmost column: x = 10 -> (10 - 10) / 24
        assert_eq!(h.locations[0][0].0, 0.0);
        assert!(h.boundary_bias()[0] == 1.0);
    }

    #[test]
    fn symmetric_predictor_gives_symmetric_histograms() {
        // each side's error grows with distance from its own edge, so the
        // left and right targets mirror each other
        let boxes = vec![BBox::new(8.0, 8.0, 24.0, 24.0), BBox::new(40.0, 36.0, 56.0, 52.0)];
        let g = GroundTruth::new(boxes.clone(), vec![0, 0]).unwrap();
        let view = view_with(
            |p| {
                let b = if p.x < 32.0 { boxes[0] } else { boxes[1] };
                BBox::new(b.l + (p.x - b.l) * 0.1, b.t, b.r + (p.x - b.r) * 0.1, b.b)
            },
            |_| 0.9,
        );
        let a = accuracy_maps_from_view(&view, &g, &AnalysisParams { level: Some(0), margin: 0.0 }).unwrap();
        let h = best_location_histogram(&a.maps, &HistogramParams::default());
        assert_eq!(h.objects, 2);
        for hist in &h.histograms {
            assert_eq!(hist.total(), 2);
        }
        assert_eq!(h.histograms[0].flipped_x(), h.histograms[2]);
        for (l, r) in h.locations[0].iter().zip(&h.locations[2]) {
            assert!((l.0 - (1.0 - r.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn histogram_clamps_to_edge_bins() {
        let mut h = Histogram2d::new(21, -0.5, 1.5);
        h.add(-3.0, 5.0);
        h.add(1.5, -0.5);
        assert_eq!(h.counts[20 * 21], 1);
        assert_eq!(h.counts[20], 1);
        assert_eq!(h.total(), 2);
    }

    #[test]
    fn bad_level_rejected() {
        let g = gt();
        let view = view_with(|_| g.boxes[0], |_| 0.9);
        assert!(accuracy_maps_from_view(&view, &g, &AnalysisParams { level: Some(5), margin: 0.0 }).is_err());
    }
}
