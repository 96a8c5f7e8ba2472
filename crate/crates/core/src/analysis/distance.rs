//! Distances from the points used to regress each box side to that side of
//! the object, normalized by the object size.
//!
//! The object silhouette is its gt rectangle, so the boundary a side is
//! measured against is the full edge segment (e.g. `x = l, y ∈ [t, b]`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};
use crate::head::points::boundary_points;
use crate::model::{Detector, HeadOutput};
use crate::tensor::Tensor;
use crate::train::{assign_samples, GroundTruth};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointConfig {
    /// The grid center, shared by all four sides.
    GridPoint,
    /// The grid center moved by the learned along-edge shift of each side.
    GridOffset,
    /// Midpoints of the coarse box edges.
    Midpoint,
    /// The dynamic boundary points.
    Dynamic,
}

impl PointConfig {
    pub const ALL: [PointConfig; 4] = [
        PointConfig::GridPoint,
        PointConfig::GridOffset,
        PointConfig::Midpoint,
        PointConfig::Dynamic,
    ];
}

/// Normalized distance from `p` to side `side` (l, t, r, b) of `gt`.
pub fn edge_distance(p: Point, gt: &BBox, side: usize) -> f64 {
    let (w, h) = (gt.width(), gt.height());
    let outside = |v: f64, lo: f64, hi: f64| (lo - v).max(v - hi).max(0.0);
    let (dx, dy) = match side {
        0 => ((p.x - gt.l) / w, outside(p.y, gt.t, gt.b) / h),
        1 => (outside(p.x, gt.l, gt.r) / w, (p.y - gt.t) / h),
        2 => ((p.x - gt.r) / w, outside(p.y, gt.t, gt.b) / h),
        _ => (outside(p.x, gt.l, gt.r) / w, (p.y - gt.b) / h),
    };
    dx.hypot(dy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceParams {
    pub bins: usize,
    /// Upper edge of the last bin; larger distances are counted there.
    pub max: f64,
}

impl Default for DistanceParams {
    fn default() -> Self {
        DistanceParams { bins: 20, max: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceDistribution {
    pub config: PointConfig,
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub bin_width: f64,
    pub histogram: Vec<u64>,
    #[serde(skip)]
    pub distances: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl DistanceDistribution {
    pub fn new(config: PointConfig, distances: Vec<f64>, p: &DistanceParams) -> Self {
        let bin_width = p.max / p.bins as f64;
        let mut histogram = vec![0; p.bins];
        for &d in &distances {
            let k = ((d / bin_width).floor() as usize).min(p.bins - 1);
            histogram[k] += 1;
        }
        let mean = if distances.is_empty() {
            f64::NAN
        } else {
            distances.iter().sum::<f64>() / distances.len() as f64
        };
        DistanceDistribution {
            config,
            count: distances.len(),
            median: median(&distances),
            mean,
            bin_width,
            histogram,
            distances,
        }
    }
}

/// The four points a configuration uses for one grid.
pub fn config_points(config: PointConfig, center: Point, coarse: &BBox, boundary: &[Point; 4]) -> [Point; 4] {
    let (mid, _) = boundary_points(coarse, [0.0; 4]);
    match config {
        PointConfig::GridPoint => [center; 4],
        PointConfig::GridOffset => {
            let mut out = [center; 4];
            for k in 0..4 {
                out[k] = Point::new(center.x + boundary[k].x - mid[k].x, center.y + boundary[k].y - mid[k].y);
            }
            out
        }
        PointConfig::Midpoint => mid,
        PointConfig::Dynamic => *boundary,
    }
}

/// Adds the distances of every positive grid of one image, per config.
pub fn collect_distances(out: &HeadOutput, gt: &GroundTruth, acc: &mut [Vec<f64>; 4]) {
    let assignment = assign_samples(&out.grids, gt);
    for pos in &assignment.positives {
        let g = &out.grids[pos.cell];
        let target = &gt.boxes[pos.gt];
        for (k, config) in PointConfig::ALL.iter().enumerate() {
            let pts = config_points(*config, g.center, &g.points.coarse, &g.points.boundary);
            for (side, p) in pts.iter().enumerate() {
                acc[k].push(edge_distance(*p, target, side));
            }
        }
    }
}

/// Distance distributions over the positive grids of a dataset, one per
/// entry of [`PointConfig::ALL`].
pub fn point_distance_distribution(
    det: &Detector,
    images: &[Tensor],
    gts: &[GroundTruth],
    p: &DistanceParams,
) -> Result<Vec<DistanceDistribution>> {
    if images.len() != gts.len() {
        return Err(Error::Shape {
            op: "point_distance_distribution",
            dim: "images vs gts".into(),
            expected: images.len(),
            got: gts.len(),
        });
    }
    if p.bins == 0 || !(p.max > 0.0) {
        return Err(Error::invalid("point_distance_distribution", "need bins > 0 and max > 0"));
    }
    let mut acc: [Vec<f64>; 4] = Default::default();
    for (image, gt) in images.iter().zip(gts) {
        collect_distances(&det.predict(image)?, gt, &mut acc);
    }
    Ok(PointConfig::ALL
        .iter()
        .zip(acc)
        .map(|(&c, d)| DistanceDistribution::new(c, d, p))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::train::{generate_scene, SceneConfig};
    use proptest::prelude::*;

    #[test]
    fn on_edge_points_have_zero_distance() {
        let b = BBox::new(10.0, 20.0, 30.0, 60.0);
        assert_eq!(edge_distance(Point::new(10.0, 35.0), &b, 0), 0.0);
        assert_eq!(edge_distance(Point::new(12.0, 20.0), &b, 1), 0.0);
        assert_eq!(edge_distance(Point::new(30.0, 60.0), &b, 2), 0.0);
        assert_eq!(edge_distance(Point::new(30.0, 60.0), &b, 3), 0.0);
    }

    #[test]
    fn distances_are_normalized_by_box_size() {
        let b = BBox::new(0.0, 0.0, 20.0, 40.0);
        // 5 px right of the left edge, 10 px below the bottom corner
        assert!((edge_distance(Point::new(5.0, 50.0), &b, 0) - (0.25f64).hypot(0.25)).abs() < 1e-15);
        assert!((edge_distance(Point::new(10.0, 20.0), &b, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn zero_shift_model_dynamic_equals_midpoint() {
        let det = Detector::new(ModelConfig::default(), 3).unwrap();
        let mut det = det;
        for p in det.params_mut() {
            if p.name.starts_with("head.point_out") {
                p.value.fill(0.0);
            }
        }
        let cfg = SceneConfig::default();
        let scenes: Vec<_> = (0..6).map(|s| generate_scene(s, &cfg).unwrap()).collect();
        let images: Vec<Tensor> = scenes.iter().map(|s| s.image.clone()).collect();
        let gts: Vec<GroundTruth> = scenes.iter().map(|s| s.gt.clone()).collect();
        let d = point_distance_distribution(&det, &images, &gts, &DistanceParams::default()).unwrap();
        assert_eq!(d[2].distances, d[3].distances);
        assert_eq!(d[2].histogram, d[3].histogram);
        assert_eq!(d[0].distances, d[1].distances);
        let total: u64 = d[0].histogram.iter().sum();
        assert_eq!(total as usize, d[0].count);
    }

    proptest! {
        #[test]
        fn distances_nonnegative(
            x in -50.0f64..100.0, y in -50.0f64..100.0,
            l in 0.0f64..30.0, t in 0.0f64..30.0, w in 1.0f64..40.0, h in 1.0f64..40.0,
        ) {
            let b = BBox::new(l, t, l + w, t + h);
            for side in 0..4 {
                let d = edge_distance(Point::new(x, y), &b, side);
                prop_assert!(d >= 0.0 && d.is_finite());
            }
        }

        #[test]
        fn points_along_an_edge_are_never_closer_than_on_it(
            l in 0.0f64..30.0, t in 0.0f64..30.0, w in 1.0f64..40.0, h in 1.0f64..40.0,
            dx in -10.0f64..10.0, s in -30.0f64..30.0,
        ) {
            // moving along the edge direction cannot reduce the distance to
            // the edge segment once inside its extent
            let b = BBox::new(l, t, l + w, t + h);
            let on = Point::new(l + dx, t + h / 2.0);
            let moved = Point::new(on.x, on.y + s);
            prop_assert!(edge_distance(moved, &b, 0) >= edge_distance(on, &b, 0));
        }
    }
}
