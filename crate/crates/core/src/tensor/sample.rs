//! Bilinear sampling of `H×W` maps at real-valued grid coordinates.
//!
//! Coordinates are clamped to `[0, W−1] × [0, H−1]`; outside that box the
//! coordinate derivative is zero. At integer coordinates the cell to the
//! right (below) is used, so the coordinate derivative is the right limit.
//! On the last row/column the cell to the left (above) is used instead.

use crate::error::{Error, Result};

/// The four support indices and weights of one bilinear sample, plus the
/// weight derivatives with respect to the sample coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Taps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub dweight_dx: [f64; 4],
    pub dweight_dy: [f64; 4],
}

fn axis(coord: f64, extent: usize) -> (usize, usize, f64, f64) {
    let hi = (extent - 1) as f64;
    let active = if coord >= 0.0 && coord < hi { 1.0 } else { 0.0 };
    let c = coord.clamp(0.0, hi);
    if extent == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let lo = (c.floor() as usize).min(extent - 2);
    (lo, lo + 1, c - lo as f64, active)
}

impl Taps {
    pub fn new(height: usize, width: usize, x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite {
                what: format!("bilinear sample coordinate ({x}, {y})"),
            });
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("bilinear_sample", "empty map"));
        }
        let (x0, x1, fx, ax) = axis(x, width);
        let (y0, y1, fy, ay) = axis(y, height);
        Ok(Taps {
            index: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
            weight: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            dweight_dx: [-(1.0 - fy) * ax, (1.0 - fy) * ax, -fy * ax, fy * ax],
            dweight_dy: [-(1.0 - fx) * ay, -fx * ay, (1.0 - fx) * ay, fx * ay],
        })
    }

    #[inline]
    pub fn sample(&self, map: &[f64]) -> f64 {
        (0..4).map(|k| self.weight[k] * map[self.index[k]]).sum()
    }

    /// `(∂value/∂x, ∂value/∂y)` for the given map.
    #[inline]
    pub fn coord_grad(&self, map: &[f64]) -> (f64, f64) {
        let mut gx = 0.0;
        let mut gy = 0.0;
        for k in 0..4 {
            let v = map[self.index[k]];
            gx += self.dweight_dx[k] * v;
            gy += self.dweight_dy[k] * v;
        }
        (gx, gy)
    }

    /// Accumulates `upstream · ∂value/∂map` into `map_grad`.
    #[inline]
    pub fn scatter(&self, map_grad: &mut [f64], upstream: f64) {
        for k in 0..4 {
            map_grad[self.index[k]] += upstream * self.weight[k];
        }
    }
}

/// Samples `map` (`height×width`, row-major) at grid coordinates `(x, y)`.
pub fn bilinear_sample(map: &[f64], height: usize, width: usize, x: f64, y: f64) -> Result<f64> {
    if map.len() != height * width {
        return Err(Error::Shape {
            op: "bilinear_sample",
            dim: "map length".into(),
            expected: height * width,
            got: map.len(),
        });
    }
    Ok(Taps::new(height, width, x, y)?.sample(map))
}
