//! Synthetic detection scenes: class-colored filled rectangles on a noisy
//! background.
//!
//! Pixel values are multiples of 1/255 so images survive an 8-bit PPM round
//! trip unchanged. A rectangle with box `(l, t, r, b)` covers the pixels
//! `l ≤ x < r`, `t ≤ y < b`, so its pixel extent equals its box exactly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::assign::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Base colors per class; classes beyond the palette reuse it with a
/// brightness change.
const PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.90, 0.85, 0.10],
    [0.80, 0.20, 0.85],
    [0.10, 0.85, 0.85],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub max_objects: usize,
    pub classes: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Half-width of the uniform background noise.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 64,
            max_objects: 3,
            classes: 3,
            min_size: 8,
            max_size: 32,
            noise: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::invalid("generate_scene", r));
        if self.classes == 0 || self.max_objects == 0 {
            return bad("classes and max_objects must be >= 1".into());
        }
        if self.min_size < 8 || self.min_size > self.max_size {
            return bad(format!("object size range {}..={} must start at >= 8", self.min_size, self.max_size));
        }
        if self.max_size > self.width.min(self.height) {
            return bad(format!(
                "object size {} exceeds image {}x{}",
                self.max_size, self.width, self.height
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub gt: GroundTruth,
}

pub fn class_color(class: usize) -> [f64; 3] {
    let base = PALETTE[class % PALETTE.len()];
    let round = class / PALETTE.len();
    let k = 1.0 / (1.0 + round as f64 * 0.6);
    base.map(|v| v * k)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn overlaps_with_gap(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.l < b.r + gap && b.l < a.r + gap && a.t < b.b + gap && b.t < a.b + gap
}

/// Draws a scene deterministically from `seed`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width, cfg.height);
    let wanted = rng.gen_range(1..=cfg.max_objects);
    let mut boxes: Vec<BBox> = Vec::with_capacity(wanted);
    let mut labels = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while boxes.len() < wanted && attempts < 200 {
        attempts += 1;
        let bw = rng.gen_range(cfg.min_size..=cfg.max_size);
        let bh = rng.gen_range(cfg.min_size..=cfg.max_size);
        let l = rng.gen_range(0..=w - bw);
        let t = rng.gen_range(0..=h - bh);
        let b = BBox::new(l as f64, t as f64, (l + bw) as f64, (t + bh) as f64);
        if boxes.iter().any(|o| overlaps_with_gap(o, &b, 2.0)) {
            continue;
        }
        boxes.push(b);
        labels.push(rng.gen_range(0..cfg.classes));
    }

    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for v in &mut data[c * h * w..(c + 1) * h * w] {
            *v = quantize(0.4 + rng.gen_range(-cfg.noise..=cfg.noise));
        }
    }
    for (b, &label) in boxes.iter().zip(&labels) {
        let color = class_color(label);
        for y in b.t as usize..b.b as usize {
            for x in b.l as usize..b.r as usize {
                for (c, base) in color.iter().enumerate() {
                    data[(c * h + y) * w + x] = quantize(base + rng.gen_range(-0.05..=0.05));
                }
            }
        }
    }
    Ok(Scene {
        image: Tensor::from_vec(&[3, h, w], data)?,
        gt: GroundTruth::new(boxes, labels)?,
    })
}

/// Stateless 64-bit mix used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Domain tag separating held-out scenes from the training stream.
pub const HELD_OUT_DOMAIN: u64 = 0x4845_4C44;

/// Seed of held-out scene `index` for a dataset seed.
pub fn held_out_seed(seed: u64, index: usize) -> u64 {
    mix_seed(mix_seed(seed, HELD_OUT_DOMAIN), index as u64)
}

pub fn held_out_set(seed: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<Scene>> {
    (0..count).map(|i| generate_scene(held_out_seed(seed, i), cfg)).collect()
}
