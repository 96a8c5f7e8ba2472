//! Positive/negative sample assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Point};
use crate::head::{GridIndex, GridPrediction};

/// Coarse-box IoU a grid must strictly exceed to become positive.
pub const POSITIVE_IOU: f64 = 0.6;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<BBox>, labels: Vec<usize>) -> Result<Self> {
        if boxes.len() != labels.len() {
            return Err(Error::Shape {
                op: "ground_truth",
                dim: "label count".into(),
                expected: boxes.len(),
                got: labels.len(),
            });
        }
        Ok(GroundTruth { boxes, labels })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// What the assignment needs to know about one grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignCell {
    pub grid: GridIndex,
    pub center: Point,
    pub coarse: BBox,
}

impl From<&GridPrediction> for AssignCell {
    fn from(p: &GridPrediction) -> Self {
        AssignCell {
            grid: p.grid,
            center: p.center,
            coarse: p.points.coarse,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Positive {
    /// Index into the grid list.
    pub cell: usize,
    pub grid: GridIndex,
    pub gt: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CenterMatch {
    pub gt: usize,
    pub cell: usize,
    pub grid: GridIndex,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignment {
    pub positives: Vec<Positive>,
    pub center_matches: Vec<CenterMatch>,
    /// Matched gt per cell, `None` for negatives.
    pub targets: Vec<Option<usize>>,
}

pub fn assign_samples(grids: &[GridPrediction], gts: &GroundTruth) -> Assignment {
    let cells: Vec<AssignCell> = grids.iter().map(AssignCell::from).collect();
    assign_cells(&cells, gts)
}

/// Each cell is positive for the gt its coarse box overlaps most, iff that
/// IoU is strictly above [`POSITIVE_IOU`]. Each gt additionally gets one
/// center match: the cell whose center is nearest to the gt center, ties
/// going to the coarser level, then to row-major order.
pub fn assign_cells(cells: &[AssignCell], gts: &GroundTruth) -> Assignment {
    let mut out = Assignment {
        targets: vec![None; cells.len()],
        ..Default::default()
    };
    if gts.is_empty() {
        return out;
    }
    for (k, c) in cells.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in gts.boxes.iter().enumerate() {
            let v = iou(&c.coarse, b);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v > POSITIVE_IOU {
                out.targets[k] = Some(g);
                out.positives.push(Positive {
                    cell: k,
                    grid: c.grid,
                    gt: g,
                });
            }
        }
    }
    for (g, b) in gts.boxes.iter().enumerate() {
        let gc = b.center();
        let key = |c: &AssignCell| {
            let d = (c.center.x - gc.x).powi(2) + (c.center.y - gc.y).powi(2);
            (d, std::cmp::Reverse(c.grid.level), c.grid.i, c.grid.j)
        };
        let best = cells
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| key(a).partial_cmp(&key(b)).expect("finite distances"));
        if let Some((k, c)) = best {
            out.center_matches.push(CenterMatch {
                gt: g,
                cell: k,
                grid: c.grid,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(level: usize, i: usize, j: usize, stride: f64, coarse: BBox) -> AssignCell {
        AssignCell {
            grid: GridIndex { level, i, j },
            center: Point::new((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride),
            coarse,
        }
    }

    fn gt1(b: BBox) -> GroundTruth {
        GroundTruth::new(vec![b], vec![0]).unwrap()
    }

    #[test]
    fn iou_threshold_is_strict() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        // width 6 inside: IoU 0.6 exactly
        let at = cell(0, 0, 0, 4.0, BBox::new(0.0, 0.0, 6.0, 10.0));
        assert_eq!(iou(&at.coarse, &gt), 0.6);
        // width 6.5: IoU 0.65
        let above = cell(0, 0, 1, 4.0, BBox::new(0.0, 0.0, 6.5, 10.0));
        let a = assign_cells(&[at, above], &gt1(gt));
        assert_eq!(a.targets, vec![None, Some(0)]);
        assert_eq!(a.positives.len(), 1);
    }

    #[test]
    fn empty_scene_is_all_negative() {
        let cells = vec![cell(0, 0, 0, 4.0, BBox::new(0.0, 0.0, 4.0, 4.0)); 3];
        let a = assign_cells(&cells, &GroundTruth::default());
        assert!(a.positives.is_empty() && a.center_matches.is_empty());
        assert_eq!(a.targets, vec![None; 3]);
    }

    #[test]
    fn best_gt_by_iou_wins() {
        let g = GroundTruth::new(
            vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(1.0, 0.0, 11.0, 10.0)],
            vec![0, 1],
        )
        .unwrap();
        let c = cell(0, 0, 0, 4.0, BBox::new(1.0, 0.0, 10.5, 10.0));
        assert_eq!(assign_cells(&[c], &g).targets, vec![Some(1)]);
    }

    #[test]
    fn center_match_prefers_coarser_level_on_ties() {
        // gt center (8, 8): level-0 cell (1,1) at stride 8 has center (12,12)?
        // use stride 4 cell (1,1) -> (6,6) and stride 8 cell (0,0) -> (4,4):
        // distances 8 and 32, so the finer one wins.
        let b = BBox::new(4.0, 4.0, 12.0, 12.0);
        let fine = cell(0, 1, 1, 4.0, b);
        let coarse = cell(1, 0, 0, 8.0, b);
        let a = assign_cells(&[fine, coarse], &gt1(b));
        assert_eq!(a.center_matches[0].cell, 0);
        // equal distance: stride 4 cell (3,3) center (14,14), stride 8 cell (1,1) center (12,12)
        // vs gt center (13,13)
        let b = BBox::new(9.0, 9.0, 17.0, 17.0);
        let fine = cell(0, 3, 3, 4.0, b);
        let coarse = cell(1, 1, 1, 8.0, b);
        let a = assign_cells(&[fine, coarse], &gt1(b));
        assert_eq!(a.center_matches[0].grid.level, 1);
    }

    #[test]
    fn center_match_row_major_tie_break() {
        let b = BBox::new(0.0, 0.0, 8.0, 8.0);
        // all four stride-8 cells around center (8,8)... use stride 4 cells (1,1),(1,2),(2,1),(2,2)
        let b2 = BBox::new(4.0, 4.0, 12.0, 12.0);
        let cells: Vec<_> = [(2, 2), (1, 2), (2, 1), (1, 1)]
            .iter()
            .map(|&(i, j)| cell(0, i, j, 4.0, b))
            .collect();
        let a = assign_cells(&cells, &gt1(b2));
        assert_eq!(a.center_matches[0].grid, GridIndex { level: 0, i: 1, j: 1 });
    }

    #[test]
    fn one_center_match_per_gt() {
        let g = GroundTruth::new(
            vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 30.0, 40.0)],
            vec![0, 2],
        )
        .unwrap();
        let cells: Vec<_> = (0..8)
            .flat_map(|i| (0..8).map(move |j| (i, j)))
            .map(|(i, j)| cell(0, i, j, 4.0, BBox::new(0.0, 0.0, 1.0, 1.0)))
            .collect();
        let a = assign_cells(&cells, &g);
        assert_eq!(a.center_matches.len(), 2);
        assert_eq!(a.center_matches[1].grid, GridIndex { level: 0, i: 7, j: 6 });
    }
}
