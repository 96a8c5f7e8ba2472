//! Two-step dynamic point generation: a coarse box per grid, then boundary
//! points sliding along its edges and semantic points scattered around a
//! uniform prior inside it.
//!
//! Side order everywhere is `l, t, r, b`.

use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};
use crate::tensor::activation::softmax;

/// Exponent clamp for the coarse-box distances; outside it the gradient is 0.
pub const MAX_LOG_DISTANCE: f64 = 30.0;

/// Image-space center of grid `(i, j)` at the given stride.
pub fn grid_center(i: usize, j: usize, stride: f64) -> Point {
    Point::new((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride)
}

/// Coarse box from per-side log-distances: `d = exp(raw)·stride`.
/// Returns the box and the four distances (needed for the gradient).
pub fn decode_coarse_box(center: Point, stride: f64, raw: [f64; 4]) -> (BBox, [f64; 4]) {
    let d = raw.map(|r| r.clamp(-MAX_LOG_DISTANCE, MAX_LOG_DISTANCE).exp() * stride);
    let bx = BBox::new(center.x - d[0], center.y - d[1], center.x + d[2], center.y + d[3]);
    (bx, d)
}

pub fn coarse_box_backward(raw: [f64; 4], distances: [f64; 4], grad_box: [f64; 4]) -> [f64; 4] {
    let sign = [-1.0, -1.0, 1.0, 1.0];
    let mut g = [0.0; 4];
    for k in 0..4 {
        if raw[k].abs() < MAX_LOG_DISTANCE {
            g[k] = sign[k] * distances[k] * grad_box[k];
        }
    }
    g
}

/// Boundary points start at the coarse edge midpoints and slide along their
/// edge by `tanh(raw)` half edge lengths, so they never leave the segment.
pub fn boundary_points(coarse: &BBox, raw: [f64; 4]) -> ([Point; 4], [f64; 4]) {
    let th = raw.map(f64::tanh);
    let c = coarse.center();
    let (hw, hh) = (0.5 * coarse.width(), 0.5 * coarse.height());
    let pts = [
        Point::new(coarse.l, (c.y + th[0] * hh).clamp(coarse.t, coarse.b)),
        Point::new((c.x + th[1] * hw).clamp(coarse.l, coarse.r), coarse.t),
        Point::new(coarse.r, (c.y + th[2] * hh).clamp(coarse.t, coarse.b)),
        Point::new((c.x + th[3] * hw).clamp(coarse.l, coarse.r), coarse.b),
    ];
    (pts, th)
}

/// Gradients of the coarse box (`l, t, r, b`) and of the four shift raws.
pub fn boundary_points_backward(
    coarse: &BBox,
    tanh: [f64; 4],
    grad: [Point; 4],
) -> ([f64; 4], [f64; 4]) {
    let (w, h) = (coarse.width(), coarse.height());
    let mut gb = [0.0; 4];
    let mut graw = [0.0; 4];
    // vertical sliders (left, right)
    for (k, x_side) in [(0usize, 0usize), (2, 2)] {
        let (g, th) = (grad[k], tanh[k]);
        gb[x_side] += g.x;
        gb[1] += g.y * 0.5 * (1.0 - th);
        gb[3] += g.y * 0.5 * (1.0 + th);
        graw[k] = g.y * (1.0 - th * th) * 0.5 * h;
    }
    // horizontal sliders (top, bottom)
    for (k, y_side) in [(1usize, 1usize), (3, 3)] {
        let (g, th) = (grad[k], tanh[k]);
        gb[y_side] += g.y;
        gb[0] += g.x * 0.5 * (1.0 - th);
        gb[2] += g.x * 0.5 * (1.0 + th);
        graw[k] = g.x * (1.0 - th * th) * 0.5 * w;
    }
    (gb, graw)
}

/// Side length of the semantic prior grid; `n` must be a perfect square.
pub fn semantic_grid_side(n: usize) -> Result<usize> {
    let m = (n as f64).sqrt().round() as usize;
    if n == 0 || m * m != n {
        return Err(Error::invalid(
            "semantic_points",
            format!("point count {n} is not a positive perfect square"),
        ));
    }
    Ok(m)
}

/// Relative prior position of semantic point `idx` (row-major over an
/// `m×m` grid with half-cell insets).
fn prior(idx: usize, m: usize) -> (f64, f64) {
    let (row, col) = (idx / m, idx % m);
    ((col as f64 + 0.5) / m as f64, (row as f64 + 0.5) / m as f64)
}

/// `n` semantic points: uniform prior plus `tanh(raw)·(w/2, h/2)`.
/// `raw` holds `x, y` pairs, one per point.
pub fn semantic_points(coarse: &BBox, raw: &[f64], n: usize) -> Result<(Vec<Point>, Vec<[f64; 2]>)> {
    let m = semantic_grid_side(n)?;
    if raw.len() != 2 * n {
        return Err(Error::Shape {
            op: "semantic_points",
            dim: "shift raw length".into(),
            expected: 2 * n,
            got: raw.len(),
        });
    }
    let (w, h) = (coarse.width(), coarse.height());
    let mut pts = Vec::with_capacity(n);
    let mut th = Vec::with_capacity(n);
    for idx in 0..n {
        let (u, v) = prior(idx, m);
        let t = [raw[2 * idx].tanh(), raw[2 * idx + 1].tanh()];
        pts.push(Point::new(
            coarse.l + u * w + t[0] * 0.5 * w,
            coarse.t + v * h + t[1] * 0.5 * h,
        ));
        th.push(t);
    }
    Ok((pts, th))
}

/// Gradients of the coarse box and of the `2n` shift raws.
pub fn semantic_points_backward(coarse: &BBox, tanh: &[[f64; 2]], grad: &[Point]) -> ([f64; 4], Vec<f64>) {
    let n = tanh.len();
    let m = (n as f64).sqrt().round() as usize;
    let (w, h) = (coarse.width(), coarse.height());
    let mut gb = [0.0; 4];
    let mut graw = vec![0.0; 2 * n];
    for idx in 0..n {
        let (u, v) = prior(idx, m);
        let [tx, ty] = tanh[idx];
        let g = grad[idx];
        let ax = u + 0.5 * tx;
        let ay = v + 0.5 * ty;
        gb[0] += g.x * (1.0 - ax);
        gb[2] += g.x * ax;
        gb[1] += g.y * (1.0 - ay);
        gb[3] += g.y * ay;
        graw[2 * idx] = g.x * (1.0 - tx * tx) * 0.5 * w;
        graw[2 * idx + 1] = g.y * (1.0 - ty * ty) * 0.5 * h;
    }
    (gb, graw)
}

/// Per-side softmax over the `k` level raws (`raw` is side-major, length `4k`).
pub fn compute_level_weights(raw: &[f64], k: usize) -> Result<[Vec<f64>; 4]> {
    if raw.len() != 4 * k || k == 0 {
        return Err(Error::Shape {
            op: "compute_level_weights",
            dim: "raw length".into(),
            expected: 4 * k.max(1),
            got: raw.len(),
        });
    }
    let mut out: [Vec<f64>; 4] = Default::default();
    for (side, w) in out.iter_mut().enumerate() {
        *w = softmax(&raw[side * k..(side + 1) * k])?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coarse_box_examples() {
        let c = Point::new(10.0, 10.0);
        assert_eq!(decode_coarse_box(c, 4.0, [0.0; 4]).0, BBox::new(6.0, 6.0, 14.0, 14.0));
        let ln2 = 2f64.ln();
        let (b, _) = decode_coarse_box(c, 4.0, [ln2, 0.0, ln2, 0.0]);
        for (got, want) in b.to_array().iter().zip([2.0, 6.0, 18.0, 14.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn coarse_box_offsets_follow_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let raw = [(); 4].map(|_| rng.gen_range(-3.0..3.0));
            let s = [4.0, 8.0, 16.0][rng.gen_range(0..3)];
            let c = Point::new(rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0));
            let (b, _) = decode_coarse_box(c, s, raw);
            assert!((c.x - b.l - raw[0].exp() * s).abs() < 1e-9);
            assert!((c.y - b.t - raw[1].exp() * s).abs() < 1e-9);
            assert!((b.r - c.x - raw[2].exp() * s).abs() < 1e-9);
            assert!((b.b - c.y - raw[3].exp() * s).abs() < 1e-9);
            assert!(b.width() > 0.0 && b.height() > 0.0);
        }
    }

    #[test]
    fn boundary_zero_shift_is_midpoints() {
        let (p, _) = boundary_points(&BBox::new(0.0, 0.0, 4.0, 8.0), [0.0; 4]);
        assert_eq!(p, [Point::new(0.0, 4.0), Point::new(2.0, 0.0), Point::new(4.0, 4.0), Point::new(2.0, 8.0)]);
    }

    #[test]
    fn boundary_saturates_at_edge_end() {
        let (p, _) = boundary_points(&BBox::new(0.0, 0.0, 4.0, 8.0), [1e3, 0.0, 0.0, 0.0]);
        assert_eq!(p[0], Point::new(0.0, 8.0));
    }

    #[test]
    fn semantic_examples() {
        let (p, _) = semantic_points(&BBox::new(0.0, 0.0, 6.0, 6.0), &[0.0; 18], 9).unwrap();
        let want: Vec<Point> = [1.0, 3.0, 5.0]
            .iter()
            .flat_map(|&y| [1.0, 3.0, 5.0].map(|x| Point::new(x, y)))
            .collect();
        for (a, b) in p.iter().zip(&want) {
            assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
        }
        let (p, _) = semantic_points(&BBox::new(0.0, 0.0, 4.0, 4.0), &[0.0; 2], 1).unwrap();
        assert_eq!(p, vec![Point::new(2.0, 2.0)]);
        assert!(semantic_points(&BBox::new(0.0, 0.0, 4.0, 4.0), &[0.0; 4], 2).is_err());
    }

    #[test]
    fn level_weight_examples() {
        let w = compute_level_weights(&[0.0; 8], 2).unwrap();
        assert_eq!(w[0], vec![0.5, 0.5]);
        let w = compute_level_weights(&[3f64.ln(), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert!((w[0][0] - 0.75).abs() < 1e-15 && (w[0][1] - 0.25).abs() < 1e-15);
    }

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[k] += 1e-6;
                m[k] -= 1e-6;
                (f(&p) - f(&m)) / 2e-6
            })
            .collect()
    }

    #[test]
    fn point_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            // params: 4 box coords + 4 boundary raws + 8 semantic raws (n = 4)
            let mut x: Vec<f64> = vec![
                rng.gen_range(0.0..10.0),
                rng.gen_range(0.0..10.0),
                rng.gen_range(12.0..20.0),
                rng.gen_range(12.0..20.0),
            ];
            x.extend((0..12).map(|_| rng.gen_range(-1.5..1.5)));
            let probe: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = |x: &[f64]| -> f64 {
                let b = BBox::new(x[0], x[1], x[2], x[3]);
                let (bp, _) = boundary_points(&b, [x[4], x[5], x[6], x[7]]);
                let (sp, _) = semantic_points(&b, &x[8..16], 4).unwrap();
                bp.iter().chain(&sp).enumerate().map(|(k, p)| probe[2 * k] * p.x + probe[2 * k + 1] * p.y).sum()
            };
            let b = BBox::new(x[0], x[1], x[2], x[3]);
            let (_, bt) = boundary_points(&b, [x[4], x[5], x[6], x[7]]);
            let (_, st) = semantic_points(&b, &x[8..16], 4).unwrap();
            let gp: Vec<Point> = (0..8).map(|k| Point::new(probe[2 * k], probe[2 * k + 1])).collect();
            let (gb1, gr1) = boundary_points_backward(&b, bt, [gp[0], gp[1], gp[2], gp[3]]);
            let (gb2, gr2) = semantic_points_backward(&b, &st, &gp[4..]);
            let mut analytic: Vec<f64> = (0..4).map(|k| gb1[k] + gb2[k]).collect();
            analytic.extend(gr1);
            analytic.extend(gr2);
            for (a, n) in analytic.iter().zip(fd(f, &x)) {
                assert!((a - n).abs() < 1e-7, "{a} vs {n}");
            }
        }
    }

    proptest! {
        #[test]
        fn boundary_points_lie_on_their_edges(
            l in -20.0f64..60.0, t in -20.0f64..60.0, w in 0.01f64..50.0, h in 0.01f64..50.0,
            raw in proptest::array::uniform4(-20.0f64..20.0),
        ) {
            let b = BBox::new(l, t, l + w, t + h);
            let (p, _) = boundary_points(&b, raw);
            prop_assert!(p[0].x == b.l && p[0].y >= b.t && p[0].y <= b.b);
            prop_assert!(p[1].y == b.t && p[1].x >= b.l && p[1].x <= b.r);
            prop_assert!(p[2].x == b.r && p[2].y >= b.t && p[2].y <= b.b);
            prop_assert!(p[3].y == b.b && p[3].x >= b.l && p[3].x <= b.r);
        }
    }
}
