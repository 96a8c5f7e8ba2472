//! Per-grid prediction collection.
//!
//! For grid `(i, j)` on level `s0` the box side `τ` is
//! `B_τ = Σ_s W_τ(s)·P_τ(s)(p_τ) + coord_τ(p_τ)`, where `p_τ` is the side's
//! boundary point, `s` runs over the available neighbour levels and
//! `P_τ(s)` is bilinearly sampled at `g = p / stride_s − 0.5`. Class logits are
//! `z_c = Σ_i P_c(i)(q_i)` over the semantic points `q_i` on level `s0`.

use super::points::{
    boundary_points, boundary_points_backward, coarse_box_backward, decode_coarse_box,
    grid_center, semantic_points, semantic_points_backward,
};
use super::LevelMaps;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};
use crate::tensor::activation::{sigmoid, softmax, softmax_backward};
use crate::tensor::sample::Taps;

/// How points are produced and how many predictions are collected.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectConfig {
    pub classes: usize,
    /// Semantic point count `N` (1 when classification is not decoupled).
    pub semantic: usize,
    /// Level offsets relative to `s0`, in level-weight slot order.
    pub neighbor_offsets: Vec<i64>,
    /// Learned boundary shifts and level weights; otherwise every side
    /// samples its own level at the coarse-box edge midpoint.
    pub loc_dynamic: bool,
    /// Semantic points from the coarse box; otherwise one point at the grid
    /// center.
    pub cls_dynamic: bool,
}

impl CollectConfig {
    pub fn slots(&self) -> usize {
        self.neighbor_offsets.len()
    }

    /// `(slot, level)` pairs available for a grid on `level` of `n_levels`.
    pub fn neighbor_levels(&self, level: usize, n_levels: usize) -> Vec<(usize, usize)> {
        if !self.loc_dynamic {
            return vec![(0, level)];
        }
        self.neighbor_offsets
            .iter()
            .enumerate()
            .filter_map(|(slot, &off)| {
                let l = level as i64 + off;
                (l >= 0 && (l as usize) < n_levels).then_some((slot, l as usize))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridIndex {
    pub level: usize,
    pub i: usize,
    pub j: usize,
}

/// Per-grid points used for collection.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicPointSet {
    pub coarse: BBox,
    pub boundary: [Point; 4],
    pub semantic: Vec<Point>,
    /// Per side, one weight per entry of `levels`.
    pub level_weights: [Vec<f64>; 4],
    pub levels: Vec<usize>,
}

/// Everything collected for one grid, including what the backward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPrediction {
    pub grid: GridIndex,
    pub center: Point,
    pub points: DynamicPointSet,
    pub bbox: BBox,
    pub logits: Vec<f64>,
    coarse_raw: [f64; 4],
    coarse_dist: [f64; 4],
    boundary_tanh: [f64; 4],
    semantic_tanh: Vec<[f64; 2]>,
    slots: Vec<usize>,
    samples: [Vec<f64>; 4],
}

impl GridPrediction {
    pub fn scores(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }

    /// Sampled regression offset per side and per collected level.
    pub fn samples(&self) -> &[Vec<f64>; 4] {
        &self.samples
    }
}

/// Upstream gradient for one grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridGrad {
    /// `∂L/∂B` for the final box, `l, t, r, b`.
    pub bbox: [f64; 4],
    /// `∂L/∂z` for the summed class logits.
    pub logits: Vec<f64>,
    /// `∂L/∂coarse` (coarse-box supervision).
    pub coarse: [f64; 4],
}

impl GridGrad {
    pub fn zeros(classes: usize) -> Self {
        GridGrad {
            bbox: [0.0; 4],
            logits: vec![0.0; classes],
            coarse: [0.0; 4],
        }
    }
}

fn level_taps(maps: &LevelMaps, p: Point) -> Result<Taps> {
    let s = maps.stride as f64;
    Taps::new(maps.height(), maps.width(), p.x / s - 0.5, p.y / s - 0.5)
}

fn column(t: &crate::Tensor, i: usize, j: usize) -> Vec<f64> {
    (0..t.shape()[0]).map(|c| t.at3(c, i, j)).collect()
}

/// Weighted multi-level regression collection. Returns the box and the
/// per-side, per-level sampled offsets.
fn sample_regression(
    maps: &[LevelMaps],
    points: &[Point; 4],
    levels: &[usize],
    weights: &[Vec<f64>; 4],
) -> Result<(BBox, [Vec<f64>; 4])> {
    let mut sides = [0.0; 4];
    let mut samples: [Vec<f64>; 4] = Default::default();
    for side in 0..4 {
        if weights[side].len() != levels.len() {
            return Err(Error::Shape {
                op: "collect_regression",
                dim: format!("weights of side {side}"),
                expected: levels.len(),
                got: weights[side].len(),
            });
        }
        let p = points[side];
        let mut acc = 0.0;
        for (&lev, &w) in levels.iter().zip(&weights[side]) {
            let m = maps.get(lev).ok_or_else(|| Error::invalid("collect_regression", format!("level {lev} missing")))?;
            let v = level_taps(m, p)?.sample(m.reg.plane(side));
            samples[side].push(v);
            acc += w * v;
        }
        sides[side] = acc + if side % 2 == 0 { p.x } else { p.y };
    }
    Ok((BBox::from_array(sides), samples))
}

/// Box from the boundary points and per-side level weights.
pub fn collect_regression(
    maps: &[LevelMaps],
    points: &[Point; 4],
    levels: &[usize],
    weights: &[Vec<f64>; 4],
) -> Result<BBox> {
    sample_regression(maps, points, levels, weights).map(|(b, _)| b)
}

/// Summed logits `Σ_i P_c(i)(q_i)` for all classes.
pub fn classification_logits(maps: &LevelMaps, points: &[Point], classes: usize) -> Result<Vec<f64>> {
    if maps.cls.shape()[0] != points.len() * classes {
        return Err(Error::Shape {
            op: "aggregate_classification",
            dim: "classification planes".into(),
            expected: points.len() * classes,
            got: maps.cls.shape()[0],
        });
    }
    let mut z = vec![0.0; classes];
    for (i, &p) in points.iter().enumerate() {
        let taps = level_taps(maps, p)?;
        for (c, zc) in z.iter_mut().enumerate() {
            *zc += taps.sample(maps.cls.plane(i * classes + c));
        }
    }
    Ok(z)
}

/// Class scores `σ(Σ_i P_c(i)(q_i))`.
pub fn aggregate_classification(maps: &LevelMaps, points: &[Point], classes: usize) -> Result<Vec<f64>> {
    Ok(classification_logits(maps, points, classes)?
        .into_iter()
        .map(sigmoid)
        .collect())
}

pub fn collect_grid(maps: &[LevelMaps], cfg: &CollectConfig, grid: GridIndex) -> Result<GridPrediction> {
    let m = &maps[grid.level];
    let (i, j) = (grid.i, grid.j);
    let center = grid_center(i, j, m.stride as f64);
    let coarse_raw: [f64; 4] = column(&m.coarse_raw, i, j).try_into().expect("4 coarse channels");
    let (coarse, coarse_dist) = decode_coarse_box(center, m.stride as f64, coarse_raw);

    let avail = cfg.neighbor_levels(grid.level, maps.len());
    let levels: Vec<usize> = avail.iter().map(|&(_, l)| l).collect();
    let slots: Vec<usize> = avail.iter().map(|&(s, _)| s).collect();

    let (boundary, boundary_tanh, level_weights) = if cfg.loc_dynamic {
        let braw: [f64; 4] = column(&m.bshift_raw, i, j).try_into().expect("4 shift channels");
        let (pts, th) = boundary_points(&coarse, braw);
        let k = cfg.slots();
        let lw = column(&m.lvlw_raw, i, j);
        let mut weights: [Vec<f64>; 4] = Default::default();
        for (side, w) in weights.iter_mut().enumerate() {
            let raws: Vec<f64> = slots.iter().map(|&s| lw[side * k + s]).collect();
            *w = softmax(&raws)?;
        }
        (pts, th, weights)
    } else {
        let (pts, th) = boundary_points(&coarse, [0.0; 4]);
        (pts, th, [(); 4].map(|_| vec![1.0]))
    };

    let (semantic, semantic_tanh) = if cfg.cls_dynamic {
        semantic_points(&coarse, &column(&m.sshift_raw, i, j), cfg.semantic)?
    } else {
        (vec![center], vec![[0.0, 0.0]])
    };

    let (bbox, samples) = sample_regression(maps, &boundary, &levels, &level_weights)?;
    let logits = classification_logits(m, &semantic, cfg.classes)?;

    Ok(GridPrediction {
        grid,
        center,
        points: DynamicPointSet {
            coarse,
            boundary,
            semantic,
            level_weights,
            levels,
        },
        bbox,
        logits,
        coarse_raw,
        coarse_dist,
        boundary_tanh,
        semantic_tanh,
        slots,
        samples,
    })
}

/// Propagates one grid's upstream gradient into the map gradients `out`
/// (same layout as `maps`).
pub fn collect_grid_backward(
    maps: &[LevelMaps],
    cfg: &CollectConfig,
    pred: &GridPrediction,
    grad: &GridGrad,
    out: &mut [LevelMaps],
) -> Result<()> {
    let GridIndex { level, i, j } = pred.grid;
    let pts = &pred.points;
    let mut g_coarse = grad.coarse;

    // regression
    let mut g_boundary = [Point::default(); 4];
    for side in 0..4 {
        let g = grad.bbox[side];
        if g == 0.0 {
            continue;
        }
        let p = pts.boundary[side];
        if side % 2 == 0 {
            g_boundary[side].x += g;
        } else {
            g_boundary[side].y += g;
        }
        let weights = &pts.level_weights[side];
        let mut g_weights = vec![0.0; weights.len()];
        for (k, &lev) in pts.levels.iter().enumerate() {
            let m = &maps[lev];
            let taps = level_taps(m, p)?;
            g_weights[k] = g * pred.samples[side][k];
            let up = g * weights[k];
            taps.scatter(out[lev].reg.plane_mut(side), up);
            let (dx, dy) = taps.coord_grad(m.reg.plane(side));
            let s = m.stride as f64;
            g_boundary[side].x += up * dx / s;
            g_boundary[side].y += up * dy / s;
        }
        if cfg.loc_dynamic {
            let g_raw = softmax_backward(weights, &g_weights);
            let k = cfg.slots();
            for (&slot, gr) in pred.slots.iter().zip(g_raw) {
                out[level].lvlw_raw.add_at3(side * k + slot, i, j, gr);
            }
        }
    }
    let (gb, g_raw) = boundary_points_backward(&pts.coarse, pred.boundary_tanh, g_boundary);
    for k in 0..4 {
        g_coarse[k] += gb[k];
        if cfg.loc_dynamic {
            out[level].bshift_raw.add_at3(k, i, j, g_raw[k]);
        }
    }

    // classification
    if grad.logits.iter().any(|&g| g != 0.0) {
        let m = &maps[level];
        let s = m.stride as f64;
        let mut g_sem = vec![Point::default(); pts.semantic.len()];
        for (idx, &p) in pts.semantic.iter().enumerate() {
            let taps = level_taps(m, p)?;
            for (c, &g) in grad.logits.iter().enumerate() {
                let plane = idx * cfg.classes + c;
                taps.scatter(out[level].cls.plane_mut(plane), g);
                let (dx, dy) = taps.coord_grad(m.cls.plane(plane));
                g_sem[idx].x += g * dx / s;
                g_sem[idx].y += g * dy / s;
            }
        }
        if cfg.cls_dynamic {
            let (gb, g_raw) = semantic_points_backward(&pts.coarse, &pred.semantic_tanh, &g_sem);
            for k in 0..4 {
                g_coarse[k] += gb[k];
            }
            for (c, gr) in g_raw.into_iter().enumerate() {
                out[level].sshift_raw.add_at3(c, i, j, gr);
            }
        }
    }

    let g_raw = coarse_box_backward(pred.coarse_raw, pred.coarse_dist, g_coarse);
    for (k, gr) in g_raw.into_iter().enumerate() {
        out[level].coarse_raw.add_at3(k, i, j, gr);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn constant_maps(h: usize, w: usize, stride: usize, reg: [f64; 4], n: usize, c: usize, k: usize) -> LevelMaps {
        let mut r = Tensor::zeros(&[4, h, w]);
        for side in 0..4 {
            r.plane_mut(side).fill(reg[side]);
        }
        LevelMaps {
            reg: r,
            cls: Tensor::zeros(&[n * c, h, w]),
            coarse_raw: Tensor::zeros(&[4, h, w]),
            bshift_raw: Tensor::zeros(&[4, h, w]),
            sshift_raw: Tensor::zeros(&[2 * n, h, w]),
            lvlw_raw: Tensor::zeros(&[4 * k, h, w]),
            stride,
        }
    }

    #[test]
    fn single_level_offset_arithmetic() {
        let maps = vec![constant_maps(8, 8, 4, [-2.0, 0.0, 0.0, 0.0], 1, 1, 1)];
        let pts = [Point::new(7.0, 9.0), Point::new(9.0, 3.0), Point::new(12.0, 9.0), Point::new(9.0, 14.0)];
        let w = [(); 4].map(|_| vec![1.0]);
        let b = collect_regression(&maps, &pts, &[0], &w).unwrap();
        assert_eq!(b.l, 5.0);
    }

    #[test]
    fn two_level_weighted_offsets() {
        let maps = vec![
            constant_maps(16, 16, 4, [-2.0, 0.0, 0.0, 0.0], 1, 1, 2),
            constant_maps(8, 8, 8, [-4.0, 0.0, 0.0, 0.0], 1, 1, 2),
        ];
        let pts = [Point::new(10.0, 10.0); 4];
        let w = [(); 4].map(|_| vec![0.25, 0.75]);
        let b = collect_regression(&maps, &pts, &[0, 1], &w).unwrap();
        assert_eq!(b.l, 6.5);
    }

    #[test]
    fn equal_maps_make_weights_irrelevant() {
        let maps = vec![
            constant_maps(16, 16, 4, [-1.5, 2.0, 0.5, -3.0], 1, 1, 2),
            constant_maps(8, 8, 8, [-1.5, 2.0, 0.5, -3.0], 1, 1, 2),
        ];
        let pts = [Point::new(10.0, 11.0); 4];
        let a = collect_regression(&maps, &pts, &[0, 1], &[(); 4].map(|_| vec![0.1, 0.9])).unwrap();
        let b = collect_regression(&maps, &pts, &[0, 1], &[(); 4].map(|_| vec![0.8, 0.2])).unwrap();
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_summing_to_zero_give_half() {
        let mut m = constant_maps(4, 4, 4, [0.0; 4], 2, 3, 1);
        m.cls.plane_mut(0).fill(1.5);
        m.cls.plane_mut(3).fill(-1.5);
        let s = aggregate_classification(&m, &[Point::new(6.0, 6.0), Point::new(3.0, 9.0)], 3).unwrap();
        assert_eq!(s, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn saturated_logit_scores_one() {
        let mut m = constant_maps(4, 4, 4, [0.0; 4], 1, 1, 1);
        m.cls.plane_mut(0).fill(1e3);
        let s = aggregate_classification(&m, &[Point::new(6.0, 6.0)], 1).unwrap();
        assert_eq!(s, vec![1.0]);
    }

    #[test]
    fn joint_permutation_of_maps_and_points() {
        let mut m = constant_maps(6, 6, 4, [0.0; 4], 2, 2, 1);
        for (k, v) in m.cls.data_mut().iter_mut().enumerate() {
            *v = ((k * 37) % 11) as f64 * 0.1 - 0.5;
        }
        let pts = [Point::new(5.3, 7.1), Point::new(13.2, 9.9)];
        let a = aggregate_classification(&m, &pts, 2).unwrap();
        let mut swapped = m.clone();
        for c in 0..2 {
            swapped.cls.plane_mut(c).copy_from_slice(m.cls.plane(2 + c));
            swapped.cls.plane_mut(2 + c).copy_from_slice(m.cls.plane(c));
        }
        let b = aggregate_classification(&swapped, &[pts[1], pts[0]], 2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn finest_level_truncates_neighbors() {
        let cfg = CollectConfig {
            classes: 1,
            semantic: 1,
            neighbor_offsets: vec![-1, 0],
            loc_dynamic: true,
            cls_dynamic: true,
        };
        assert_eq!(cfg.neighbor_levels(0, 3), vec![(1, 0)]);
        assert_eq!(cfg.neighbor_levels(2, 3), vec![(0, 1), (1, 2)]);
        let coupled = CollectConfig { loc_dynamic: false, ..cfg };
        assert_eq!(coupled.neighbor_levels(2, 3), vec![(0, 2)]);
    }
}
