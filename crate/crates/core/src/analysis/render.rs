//! Binary PPM (P6) images: reading, writing, heatmaps and scene overlays.
//!
//! Heatmaps use min-max normalization followed by a black → red → yellow →
//! white ramp. A constant map has no range to normalize, so every cell gets
//! the fallback mid-gray [`CONSTANT_COLOR`]; NaN cells (no data) are drawn in
//! [`MISSING_COLOR`].

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::{clamp_box, BBox, Point};
use crate::head::DynamicPointSet;
use crate::model::HeadOutput;
use crate::tensor::activation::sigmoid;
use crate::train::loss::sort_box;
use crate::tensor::Tensor;
use crate::train::scene::class_color;

pub const CONSTANT_COLOR: [u8; 3] = [128, 128, 128];
pub const MISSING_COLOR: [u8; 3] = [0, 0, 64];

/// Scale factor applied by [`render_scene`].
pub const SCENE_SCALE: usize = 4;

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::Shape {
            op: "encode_ppm",
            dim: "channels".into(),
            expected: 3,
            got: c,
        });
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push((image.at3(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |r: &str| Error::Parse(format!("ppm: {r}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(bad("not a binary P6 file"));
    }
    let num = |t: String| t.parse::<usize>().map_err(|_| bad("bad header number"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let data_start = pos + 1;
    let need = 3 * w * h;
    if bytes.len() < data_start + need {
        return Err(bad(&format!("expected {need} pixel bytes, found {}", bytes.len().saturating_sub(data_start))));
    }
    let px = &bytes[data_start..data_start + need];
    let mut data = vec![0.0; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = px[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path)?)
}

fn ramp(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0) * 3.0;
    [v.min(1.0), (v - 1.0).clamp(0.0, 1.0), (v - 2.0).clamp(0.0, 1.0)]
}

/// RGB image of an `h×w` map (row-major values).
pub fn heatmap_image(values: &[f64], h: usize, w: usize) -> Result<Tensor> {
    if values.len() != h * w {
        return Err(Error::Shape {
            op: "render_heatmap",
            dim: "map size".into(),
            expected: h * w,
            got: values.len(),
        });
    }
    let finite = values.iter().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = finite.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut img = Tensor::zeros(&[3, h, w]);
    let byte = |c: [u8; 3]| c.map(|v| v as f64 / 255.0);
    for (k, &v) in values.iter().enumerate() {
        let rgb = if !v.is_finite() {
            byte(MISSING_COLOR)
        } else if hi <= lo {
            byte(CONSTANT_COLOR)
        } else {
            ramp((v - lo) / (hi - lo))
        };
        for (c, x) in rgb.iter().enumerate() {
            img.data_mut()[c * h * w + k] = *x;
        }
    }
    Ok(img)
}

pub fn render_heatmap(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    write_ppm(path, &heatmap_image(values, h, w)?)
}

/// Points drawn for one grid of interest.
#[derive(Clone, Debug, PartialEq)]
pub struct PointOverlay {
    pub grid_center: Point,
    pub points: DynamicPointSet,
}

struct Canvas {
    img: Tensor,
    h: usize,
    w: usize,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, rgb: [f64; 3]) {
        if x < 0 || y < 0 || x as usize >= self.w || y as usize >= self.h {
            return;
        }
        for (c, v) in rgb.iter().enumerate() {
            let idx = (c * self.h + y as usize) * self.w + x as usize;
            self.img.data_mut()[idx] = *v;
        }
    }

    fn rect(&mut self, b: &BBox, rgb: [f64; 3]) {
        let s = SCENE_SCALE as f64;
        let (l, t) = ((b.l * s).round() as i64, (b.t * s).round() as i64);
        let (r, bt) = ((b.r * s).round() as i64 - 1, (b.b * s).round() as i64 - 1);
        for x in l..=r {
            self.put(x, t, rgb);
            self.put(x, bt, rgb);
        }
        for y in t..=bt {
            self.put(l, y, rgb);
            self.put(r, y, rgb);
        }
    }

    fn dot(&mut self, p: Point, radius: i64, rgb: [f64; 3]) {
        let s = SCENE_SCALE as f64;
        let (cx, cy) = ((p.x * s).floor() as i64, (p.y * s).floor() as i64);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                self.put(cx + dx, cy + dy, rgb);
            }
        }
    }

    fn cross(&mut self, p: Point, arm: i64, rgb: [f64; 3]) {
        let s = SCENE_SCALE as f64;
        let (cx, cy) = ((p.x * s).floor() as i64, (p.y * s).floor() as i64);
        for d in -arm..=arm {
            self.put(cx + d, cy + d, rgb);
            self.put(cx + d, cy - d, rgb);
        }
    }
}

/// Upscaled copy of `image` with detection boxes (class colors brightened),
/// coarse boxes (gray), boundary points (yellow), semantic points (cyan) and
/// source-grid markers (magenta crosses).
pub fn scene_image(image: &Tensor, dets: &[Detection], overlays: &[PointOverlay]) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::Shape {
            op: "render_scene",
            dim: "channels".into(),
            expected: 3,
            got: c,
        });
    }
    let (sh, sw) = (h * SCENE_SCALE, w * SCENE_SCALE);
    let mut data = vec![0.0; 3 * sh * sw];
    for ch in 0..3 {
        for y in 0..sh {
            for x in 0..sw {
                data[(ch * sh + y) * sw + x] = image.at3(ch, y / SCENE_SCALE, x / SCENE_SCALE);
            }
        }
    }
    let mut cv = Canvas {
        img: Tensor::from_vec(&[3, sh, sw], data)?,
        h: sh,
        w: sw,
    };
    for d in dets {
        let col = class_color(d.class_id).map(|v| (v + 0.5).min(1.0));
        cv.rect(&d.bbox, col);
    }
    for o in overlays {
        cv.rect(&o.points.coarse, [0.6, 0.6, 0.6]);
        for &p in &o.points.semantic {
            cv.dot(p, 1, [0.0, 1.0, 1.0]);
        }
        for &p in &o.points.boundary {
            cv.dot(p, 2, [1.0, 1.0, 0.0]);
        }
        cv.cross(o.grid_center, 3, [1.0, 0.0, 1.0]);
    }
    Ok(cv.img)
}

/// Overlays of the grids that produced `dets` (as decoded from `out`).
pub fn overlays_for(out: &HeadOutput, dets: &[Detection]) -> Vec<PointOverlay> {
    let (w, h) = (out.image_width as f64, out.image_height as f64);
    dets.iter()
        .filter_map(|d| {
            out.grids.iter().find(|g| {
                g.logits.get(d.class_id).map(|&z| sigmoid(z)) == Some(d.score)
                    && clamp_box(&sort_box(&g.bbox).0, w, h) == d.bbox
            })
        })
        .map(|g| PointOverlay {
            grid_center: g.center,
            points: g.points.clone(),
        })
        .collect()
}

pub fn render_scene(image: &Tensor, dets: &[Detection], overlays: &[PointOverlay], path: &Path) -> Result<()> {
    write_ppm(path, &scene_image(image, dets, overlays)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_header() {
        let bytes = encode_ppm(&heatmap_image(&[0.0, 1.0, 2.0, 3.0], 2, 2).unwrap()).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 12);
    }

    #[test]
    fn constant_map_uses_fallback_color() {
        let img = heatmap_image(&[0.7; 6], 2, 3).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes[11..].chunks(3).all(|px| px == CONSTANT_COLOR));
    }

    #[test]
    fn heatmap_extremes_and_missing() {
        let img = heatmap_image(&[-1.0, 5.0, f64::NAN], 1, 3).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        let px: Vec<&[u8]> = bytes[11..].chunks(3).collect();
        assert_eq!(px[0], [0, 0, 0]);
        assert_eq!(px[1], [255, 255, 255]);
        assert_eq!(px[2], MISSING_COLOR);
    }

    #[test]
    fn round_trip_preserves_extents_and_levels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ppm");
        render_heatmap(&(0..15).map(f64::from).collect::<Vec<_>>(), 3, 5, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), &[3, 3, 5]);
        let again = encode_ppm(&back).unwrap();
        assert_eq!(again, std::fs::read(&path).unwrap());
    }

    #[test]
    fn header_comments_and_truncation() {
        let mut bytes = b"P6\n# comment\n1 1\n255\n".to_vec();
        bytes.extend([10, 20, 30]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.at3(2, 0, 0), 30.0 / 255.0);
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn unwritable_path_is_reported() {
        let err = render_heatmap(&[1.0], 1, 1, Path::new("/nonexistent-dir/x.ppm")).unwrap_err();
        assert_eq!(err.kind(), "io");
    }
}
