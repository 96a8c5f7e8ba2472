//! Central finite-difference checks of every hand-written gradient.
//!
//! Each check perturbs inputs by `±eps` and compares against the analytic
//! gradient with relative error `|a − n| / max(|a|, |n|, floor)`. Functions
//! report a branch key (ReLU signs, bilinear cells, assignment, comparison
//! outcomes); a coordinate whose perturbation changes the key straddles a
//! kink, where a central difference is meaningless, and is skipped.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{giou_loss_grad, BBox};
use crate::head::{collect_grid_backward, GridGrad, Head, PointChannels};
use crate::model::{Detector, Mode, ModelConfig};
use crate::tensor::activation::{sigmoid, softmax, softmax_backward};
use crate::tensor::conv::{conv2d, conv2d_backward};
use crate::tensor::sample::Taps;
use crate::tensor::Tensor;
use crate::train::loss::{focal_logit, image_loss, normalize_batch, FocalParams, LossConfig};
use crate::train::{generate_scene, Scene, SceneConfig};

pub const EPS: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub const OPS: [&str; 8] = ["conv", "bilinear", "softmax", "sigmoid", "giou", "focal", "head", "total_loss"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub op: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < TOLERANCE
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Scalar function with a branch key.
type Probe<'a> = dyn FnMut(&[f64]) -> Result<(f64, u64)> + 'a;

/// Checks `grad` against central differences of `f` at `x` on `indices`.
fn check_indices(op: &str, x: &[f64], grad: &[f64], indices: &[usize], f: &mut Probe) -> Result<CheckResult> {
    let (_, key0) = f(x)?;
    let mut res = CheckResult {
        op: op.to_string(),
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut xp = x.to_vec();
    for &k in indices {
        xp[k] = x[k] + EPS;
        let (fp, kp) = f(&xp)?;
        xp[k] = x[k] - EPS;
        let (fm, km) = f(&xp)?;
        xp[k] = x[k];
        if kp != key0 || km != key0 {
            res.skipped += 1;
            continue;
        }
        let n = (fp - fm) / (2.0 * EPS);
        res.max_rel_err = res.max_rel_err.max(rel_err(grad[k], n));
        res.checked += 1;
    }
    Ok(res)
}

fn hash_of<T: Hash>(v: T) -> u64 {
    let mut h = DefaultHasher::new();
    v.hash(&mut h);
    h.finish()
}

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
}

fn merge(results: Vec<CheckResult>, op: &str) -> CheckResult {
    CheckResult {
        op: op.to_string(),
        max_rel_err: results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
        checked: results.iter().map(|r| r.checked).sum(),
        skipped: results.iter().map(|r| r.skipped).sum(),
    }
}

pub fn check_conv(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for stride in [1, 2] {
        let (ci, co, h, w) = (2, 3, 5, 6);
        let input = Tensor::from_vec(&[ci, h, w], randn(&mut rng, ci * h * w, 1.0))?;
        let weight = Tensor::from_vec(&[co, ci, 3, 3], randn(&mut rng, co * ci * 9, 0.5))?;
        let bias = Tensor::from_vec(&[co], randn(&mut rng, co, 0.5))?;
        let out = conv2d(&input, &weight, &bias, stride, 1)?;
        let probe = randn(&mut rng, out.len(), 1.0);
        let g_out = Tensor::from_vec(out.shape(), probe.clone())?;
        let grads = conv2d_backward(&input, &weight, &g_out, stride, 1)?;
        let dot = |t: &Tensor| t.data().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();

        let n_in = input.len();
        let n_w = weight.len();
        let mut x = input.data().to_vec();
        x.extend_from_slice(weight.data());
        x.extend_from_slice(bias.data());
        let mut g = grads.input.into_data();
        g.extend_from_slice(grads.weight.data());
        g.extend_from_slice(grads.bias.data());
        let (si, sw, sb) = (input.shape().to_vec(), weight.shape().to_vec(), bias.shape().to_vec());
        let mut f = |v: &[f64]| -> Result<(f64, u64)> {
            let i = Tensor::from_vec(&si, v[..n_in].to_vec())?;
            let wt = Tensor::from_vec(&sw, v[n_in..n_in + n_w].to_vec())?;
            let b = Tensor::from_vec(&sb, v[n_in + n_w..].to_vec())?;
            Ok((dot(&conv2d(&i, &wt, &b, stride, 1)?), 0))
        };
        let all: Vec<usize> = (0..x.len()).collect();
        results.push(check_indices("conv", &x, &g, &all, &mut f)?);
    }
    Ok(merge(results, "conv"))
}

pub fn check_bilinear(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let (h, w) = (5, 6);
    for _ in 0..40 {
        let map = randn(&mut rng, h * w, 2.0);
        // include points outside the map to exercise clamping
        let x = rng.gen_range(-1.0..w as f64);
        let y = rng.gen_range(-1.0..h as f64);
        let taps = Taps::new(h, w, x, y)?;
        let (dx, dy) = taps.coord_grad(&map);
        let mut gmap = vec![0.0; h * w];
        taps.scatter(&mut gmap, 1.0);
        let mut v = map.clone();
        v.push(x);
        v.push(y);
        let mut g = gmap;
        g.push(dx);
        g.push(dy);
        let mut f = |v: &[f64]| -> Result<(f64, u64)> {
            let t = Taps::new(h, w, v[h * w], v[h * w + 1])?;
            let active: Vec<bool> = t.dweight_dx.iter().chain(&t.dweight_dy).map(|d| *d != 0.0).collect();
            Ok((t.sample(&v[..h * w]), hash_of((t.index, active))))
        };
        let all: Vec<usize> = (0..v.len()).collect();
        results.push(check_indices("bilinear", &v, &g, &all, &mut f)?);
    }
    Ok(merge(results, "bilinear"))
}

pub fn check_softmax(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for n in 1..6 {
        let v = randn(&mut rng, n, 3.0);
        let probe = randn(&mut rng, n, 1.0);
        let y = softmax(&v)?;
        let g = softmax_backward(&y, &probe);
        let mut f = |v: &[f64]| -> Result<(f64, u64)> {
            Ok((softmax(v)?.iter().zip(&probe).map(|(a, b)| a * b).sum(), 0))
        };
        let all: Vec<usize> = (0..n).collect();
        results.push(check_indices("softmax", &v, &g, &all, &mut f)?);
    }
    Ok(merge(results, "softmax"))
}

pub fn check_sigmoid(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = randn(&mut rng, 50, 8.0);
    let g: Vec<f64> = z.iter().map(|&v| sigmoid(v) * sigmoid(-v)).collect();
    let mut results = Vec::new();
    for k in 0..z.len() {
        let mut f = |v: &[f64]| -> Result<(f64, u64)> { Ok((sigmoid(v[k]), 0)) };
        results.push(check_indices("sigmoid", &z, &g, &[k], &mut f)?);
    }
    Ok(merge(results, "sigmoid"))
}

fn giou_key(a: &BBox, b: &BBox) -> u64 {
    let (x, y) = (a.to_array(), b.to_array());
    let mut bits = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            bits.push(x[i] < y[j]);
        }
    }
    hash_of(bits)
}

pub fn check_giou(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for _ in 0..100 {
        let mut bx = || {
            let l = rng.gen_range(0.0..20.0);
            let t = rng.gen_range(0.0..20.0);
            BBox::new(l, t, l + rng.gen_range(1.0..15.0), t + rng.gen_range(1.0..15.0))
        };
        let (a, b) = (bx(), bx());
        let (_, ga, gb) = giou_loss_grad(&a, &b);
        let mut x = a.to_array().to_vec();
        x.extend(b.to_array());
        let mut g = ga.to_vec();
        g.extend(gb);
        let mut f = |v: &[f64]| -> Result<(f64, u64)> {
            let a = BBox::new(v[0], v[1], v[2], v[3]);
            let b = BBox::new(v[4], v[5], v[6], v[7]);
            Ok((giou_loss_grad(&a, &b).0, giou_key(&a, &b)))
        };
        results.push(check_indices("giou", &x, &g, &(0..8).collect::<Vec<_>>(), &mut f)?);
    }
    Ok(merge(results, "giou"))
}

pub fn check_focal(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = randn(&mut rng, 60, 6.0);
    let targets: Vec<bool> = (0..z.len()).map(|_| rng.gen_bool(0.3)).collect();
    let fp = FocalParams::default();
    let g: Vec<f64> = z.iter().zip(&targets).map(|(&v, &t)| focal_logit(v, t, fp).1).collect();
    let mut results = Vec::new();
    for k in 0..z.len() {
        let mut f = |v: &[f64]| -> Result<(f64, u64)> { Ok((focal_logit(v[k], targets[k], fp).0, 0)) };
        results.push(check_indices("focal", &z, &g, &[k], &mut f)?);
    }
    Ok(merge(results, "focal"))
}

/// Small model used by the network-level checks.
pub fn tiny_model_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        classes: 2,
        n_semantic: 4,
        levels: 2,
        neighbor_offsets: vec![-1, 0],
        mode,
        channels: 6,
        stem_channels: 4,
        tower_depth: 2,
    }
}

/// Parameter coordinates to probe: up to `per_tensor` random entries of
/// every parameter tensor, as `(tensor index, entry)`.
fn sample_coords(det: &Detector, per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (pi, p) in det.params().iter().enumerate() {
        let n = p.value.len();
        if n <= per_tensor {
            out.extend((0..n).map(|k| (pi, k)));
        } else {
            let mut picked = rand::seq::index::sample(rng, n, per_tensor).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|k| (pi, k)));
        }
    }
    out
}

fn check_params(
    op: &str,
    det: &mut Detector,
    coords: &[(usize, usize)],
    analytic: &[Vec<f64>],
    eval: &mut dyn FnMut(&Detector) -> Result<(f64, u64)>,
) -> Result<CheckResult> {
    let base: Vec<f64> = coords
        .iter()
        .map(|&(pi, k)| det.params()[pi].value.data()[k])
        .collect();
    let grad: Vec<f64> = coords.iter().map(|&(pi, k)| analytic[pi][k]).collect();
    let indices: Vec<usize> = (0..coords.len()).collect();
    let cell = std::cell::RefCell::new(det);
    let mut f = |v: &[f64]| -> Result<(f64, u64)> {
        let mut d = cell.borrow_mut();
        for (&(pi, k), &x) in coords.iter().zip(v) {
            d.params_mut()[pi].value.data_mut()[k] = x;
        }
        eval(&d)
    };
    let res = check_indices(op, &base, &grad, &indices, &mut f);
    let d = cell.into_inner();
    for (&(pi, k), &x) in coords.iter().zip(&base) {
        d.params_mut()[pi].value.data_mut()[k] = x;
    }
    res
}

/// Head parameters and input features against a random linear functional of
/// every grid's box, logits and coarse box.
pub fn check_head(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for mode in [Mode::Decoupled, Mode::Coupled] {
        let cfg = tiny_model_config(mode);
        let mut det = Detector::new(cfg.clone(), seed)?;
        perturb_point_biases(&mut det.head, &mut rng);
        let image = Tensor::from_vec(&[3, 32, 32], (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect())?;
        let (out, cache) = det.forward(&image)?;
        let probes: Vec<GridGrad> = out
            .grids
            .iter()
            .map(|g| GridGrad {
                bbox: [(); 4].map(|_| rng.gen_range(-0.1..0.1)),
                logits: (0..g.logits.len()).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                coarse: [(); 4].map(|_| rng.gen_range(-0.1..0.1)),
            })
            .collect();
        det.zero_grad();
        let mut map_grads: Vec<_> = out.maps.iter().map(|m| m.zeros_like()).collect();
        for (pred, g) in out.grids.iter().zip(&probes) {
            collect_grid_backward(&out.maps, det.collect_config(), pred, g, &mut map_grads)?;
        }
        det.dense_backward(&cache, &map_grads)?;
        let analytic: Vec<Vec<f64>> = det.params().iter().map(|p| p.grad.data().to_vec()).collect();
        let head_start = det.backbone.params().len();
        let coords: Vec<(usize, usize)> = sample_coords(&det, 12, &mut rng)
            .into_iter()
            .filter(|&(pi, _)| pi >= head_start)
            .collect();
        let mut eval = |d: &Detector| -> Result<(f64, u64)> {
            let (o, c) = d.forward(&image)?;
            let mut v = 0.0;
            for (pred, g) in o.grids.iter().zip(&probes) {
                let b = pred.bbox.to_array();
                let cb = pred.points.coarse.to_array();
                for k in 0..4 {
                    v += g.bbox[k] * b[k] + g.coarse[k] * cb[k];
                }
                v += pred.logits.iter().zip(&g.logits).map(|(a, b)| a * b).sum::<f64>();
            }
            Ok((v, d.branch_key(&c, &o)))
        };
        results.push(check_params("head", &mut det, &coords, &analytic, &mut eval)?);
    }
    Ok(merge(results, "head"))
}

/// Moves the point-generation biases off zero so the shift and weight paths
/// are exercised away from their symmetric initialization.
fn perturb_point_biases(head: &mut Head, rng: &mut ChaCha8Rng) {
    let PointChannels { .. } = head.point_channels;
    for v in head.point_out.bias.value.data_mut() {
        *v += rng.gen_range(-0.5..0.5);
    }
}

/// One-object 32×32 scene for the total-loss check.
pub fn tiny_scene(seed: u64) -> Result<Scene> {
    let cfg = SceneConfig {
        width: 32,
        height: 32,
        max_objects: 1,
        classes: 2,
        min_size: 10,
        max_size: 20,
        noise: 0.1,
    };
    generate_scene(seed, &cfg)
}

fn loss_key(det: &Detector, scene: &Scene, cfg: &LossConfig) -> Result<(f64, u64)> {
    let (out, cache) = det.forward(&scene.image)?;
    let mut img = [image_loss(&out, &scene.gt, cfg.focal)];
    let terms = normalize_batch(&mut img, cfg);
    let a = &img[0].assignment;
    let mut key = vec![det.branch_key(&cache, &out)];
    key.push(hash_of((&a.targets, a.center_matches.iter().map(|m| m.cell).collect::<Vec<_>>())));
    for p in &a.positives {
        let (sorted, sx, sy) = crate::train::loss::sort_box(&out.grids[p.cell].bbox);
        key.push(giou_key(&sorted, &scene.gt.boxes[p.gt]) ^ hash_of((sx, sy)));
    }
    for m in &a.center_matches {
        key.push(giou_key(&out.grids[m.cell].points.coarse, &scene.gt.boxes[m.gt]));
    }
    Ok((terms.total, hash_of(key)))
}

/// Total loss against every parameter tensor (backbone and head) on a
/// one-object scene. The model is nudged so that some grids are positive.
pub fn check_total_loss(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig::default();
    let mut results = Vec::new();
    for mode in [Mode::Decoupled, Mode::Coupled] {
        let mut det = Detector::new(tiny_model_config(mode), seed)?;
        perturb_point_biases(&mut det.head, &mut rng);
        // pick a scene and a coarse-box bias (object-sized boxes) that yield positives
        let mut found = None;
        'search: for (scene_seed, stride) in (0..40).flat_map(|s| [(s, 4.0), (s, 8.0)]) {
            let scene = tiny_scene(seed.wrapping_mul(1000).wrapping_add(scene_seed))?;
            let gt = scene.gt.boxes[0];
            let half = 0.25 * (gt.width() + gt.height());
            for k in 0..20 {
                let raw = (half / stride).ln() + 0.02 * k as f64 - 0.2;
                for (side, v) in det.head.point_out.bias.value.data_mut()[..4].iter_mut().enumerate() {
                    *v = raw + 0.01 * side as f64;
                }
                let (out, cache) = det.forward(&scene.image)?;
                let mut img = [image_loss(&out, &scene.gt, cfg.focal)];
                normalize_batch(&mut img, &cfg);
                if img[0].positives > 0 {
                    found = Some((scene, out, cache, img));
                    break 'search;
                }
            }
        }
        let (scene, out, cache, img) =
            found.ok_or_else(|| Error::invalid("gradcheck", "total-loss scene produced no positives"))?;
        det.zero_grad();
        det.backward(&cache, &out, &img[0].grads)?;
        let analytic: Vec<Vec<f64>> = det.params().iter().map(|p| p.grad.data().to_vec()).collect();
        let coords = sample_coords(&det, 12, &mut rng);
        let mut eval = |d: &Detector| loss_key(d, &scene, &cfg);
        results.push(check_params("total_loss", &mut det, &coords, &analytic, &mut eval)?);
    }
    Ok(merge(results, "total_loss"))
}

pub fn run_op(op: &str, seed: u64) -> Result<CheckResult> {
    match op {
        "conv" => check_conv(seed),
        "bilinear" => check_bilinear(seed),
        "softmax" => check_softmax(seed),
        "sigmoid" => check_sigmoid(seed),
        "giou" => check_giou(seed),
        "focal" => check_focal(seed),
        "head" => check_head(seed),
        "total_loss" => check_total_loss(seed),
        _ => Err(Error::invalid("gradcheck", format!("unknown op `{op}` (one of {})", OPS.join(", ")))),
    }
}

pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    OPS.iter().map(|op| run_op(op, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_checks_pass() {
        for op in ["conv", "bilinear", "softmax", "sigmoid", "giou", "focal"] {
            let r = run_op(op, 1).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(run_op("bogus", 0).is_err());
    }
}
