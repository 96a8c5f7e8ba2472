//! The detection head: dense prediction maps per pyramid level, the
//! point-generation branch, and per-grid prediction collection.

pub mod collect;
pub mod points;

use rand::Rng;

use crate::error::Result;
use crate::tensor::conv::{Conv2d, ConvCache};
use crate::tensor::{relu_backward_inplace, relu_inplace, Param, Tensor};

pub use collect::{
    aggregate_classification, collect_grid, collect_grid_backward, collect_regression,
    CollectConfig, DynamicPointSet, GridGrad, GridIndex, GridPrediction,
};

/// Dense outputs of one pyramid level.
///
/// `reg` holds signed image-space offsets (raw conv output times the level
/// stride); `cls` holds `N·C` logit planes, plane `i·C + c` being class `c`
/// of semantic map `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelMaps {
    pub reg: Tensor,
    pub cls: Tensor,
    pub coarse_raw: Tensor,
    pub bshift_raw: Tensor,
    pub sshift_raw: Tensor,
    pub lvlw_raw: Tensor,
    pub stride: usize,
}

impl LevelMaps {
    pub fn height(&self) -> usize {
        self.reg.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.reg.shape()[2]
    }

    pub fn zeros_like(&self) -> LevelMaps {
        LevelMaps {
            reg: Tensor::zeros(self.reg.shape()),
            cls: Tensor::zeros(self.cls.shape()),
            coarse_raw: Tensor::zeros(self.coarse_raw.shape()),
            bshift_raw: Tensor::zeros(self.bshift_raw.shape()),
            sshift_raw: Tensor::zeros(self.sshift_raw.shape()),
            lvlw_raw: Tensor::zeros(self.lvlw_raw.shape()),
            stride: self.stride,
        }
    }

    pub fn point_blocks(&self) -> [&Tensor; 4] {
        [&self.coarse_raw, &self.bshift_raw, &self.sshift_raw, &self.lvlw_raw]
    }
}

/// Channel layout of the point-generation output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PointChannels {
    pub semantic: usize,
    pub levels: usize,
}

impl PointChannels {
    pub fn sizes(&self) -> [usize; 4] {
        [4, 4, 2 * self.semantic, 4 * self.levels]
    }

    pub fn total(&self) -> usize {
        self.sizes().iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub cls_tower: Vec<Conv2d>,
    pub reg_tower: Vec<Conv2d>,
    pub cls_out: Conv2d,
    pub reg_out: Conv2d,
    pub point_out: Conv2d,
    pub classes: usize,
    pub point_channels: PointChannels,
}

/// Cached activations of one level's head pass.
#[derive(Clone, Debug)]
pub struct HeadLevelCache {
    cls: Vec<(ConvCache, Tensor)>,
    reg: Vec<(ConvCache, Tensor)>,
    cls_out: ConvCache,
    reg_out: ConvCache,
    point_out: ConvCache,
}

impl HeadLevelCache {
    /// Post-ReLU tower activations, classification tower first.
    pub fn activations(&self) -> impl Iterator<Item = &Tensor> {
        self.cls.iter().chain(&self.reg).map(|(_, t)| t)
    }
}

fn he_init<R: Rng>(conv: &mut Conv2d, rng: &mut R) {
    let std = (2.0 / conv.fan_in() as f64).sqrt();
    normal_fill(&mut conv.weight.value, std, rng);
}

pub(crate) fn normal_fill<R: Rng>(t: &mut Tensor, std: f64, rng: &mut R) {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("finite std");
    for v in t.data_mut() {
        *v = dist.sample(rng);
    }
}

/// Initial coarse-box log distance: every side starts one stride from the
/// grid center, so level `s` initially proposes `2s`-wide squares.
pub const COARSE_PRIOR_LOG_DISTANCE: f64 = 0.0;

/// Bias for each of the `n` summed classification maps such that the
/// initial score is `prior`.
pub fn prior_bias(prior: f64, n: usize) -> f64 {
    (prior / (1.0 - prior)).ln() / n as f64
}

impl Head {
    pub fn new<R: Rng>(
        channels: usize,
        depth: usize,
        classes: usize,
        point_channels: PointChannels,
        rng: &mut R,
    ) -> Self {
        let tower = |name: &str, rng: &mut R| -> Vec<Conv2d> {
            (0..depth)
                .map(|d| {
                    let mut c = Conv2d::new(&format!("head.{name}.{d}"), channels, channels, 3, 1);
                    he_init(&mut c, rng);
                    c
                })
                .collect()
        };
        let cls_tower = tower("cls_tower", rng);
        let reg_tower = tower("reg_tower", rng);
        let n = point_channels.semantic;
        let mut cls_out = Conv2d::new("head.cls_out", channels, n * classes, 3, 1);
        normal_fill(&mut cls_out.weight.value, 0.01, rng);
        cls_out.bias.value.fill(prior_bias(0.01, n));
        let mut reg_out = Conv2d::new("head.reg_out", channels, 4, 3, 1);
        normal_fill(&mut reg_out.weight.value, 0.01, rng);
        let mut point_out = Conv2d::new("head.point_out", channels, point_channels.total(), 3, 1);
        normal_fill(&mut point_out.weight.value, 0.01, rng);
        point_out.bias.value.data_mut()[..4].fill(COARSE_PRIOR_LOG_DISTANCE);
        Head {
            cls_tower,
            reg_tower,
            cls_out,
            reg_out,
            point_out,
            classes,
            point_channels,
        }
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.cls_tower
            .iter()
            .chain(&self.reg_tower)
            .chain([&self.cls_out, &self.reg_out, &self.point_out])
    }

    pub fn params(&self) -> Vec<&Param> {
        self.convs().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.cls_tower
            .iter_mut()
            .chain(self.reg_tower.iter_mut())
            .chain([&mut self.cls_out, &mut self.reg_out, &mut self.point_out])
            .flat_map(|c| c.params_mut())
            .collect()
    }

    /// Dense prediction for one level's features.
    pub fn forward_level(&self, features: &Tensor, stride: usize) -> Result<(LevelMaps, HeadLevelCache)> {
        let run_tower = |convs: &[Conv2d]| -> Result<(Tensor, Vec<(ConvCache, Tensor)>)> {
            let mut x = features.clone();
            let mut caches = Vec::with_capacity(convs.len());
            for c in convs {
                let (mut y, cache) = c.forward(&x)?;
                relu_inplace(&mut y);
                caches.push((cache, y.clone()));
                x = y;
            }
            Ok((x, caches))
        };
        let (cls_feat, cls_caches) = run_tower(&self.cls_tower)?;
        let (reg_feat, reg_caches) = run_tower(&self.reg_tower)?;
        let (cls, cls_out) = self.cls_out.forward(&cls_feat)?;
        let (mut reg, reg_out) = self.reg_out.forward(&reg_feat)?;
        reg.scale(stride as f64);
        let (pts, point_out) = self.point_out.forward(&reg_feat)?;
        let blocks = split_channels(&pts, &self.point_channels.sizes())?;
        let [coarse_raw, bshift_raw, sshift_raw, lvlw_raw]: [Tensor; 4] =
            blocks.try_into().expect("four point blocks");
        Ok((
            LevelMaps {
                reg,
                cls,
                coarse_raw,
                bshift_raw,
                sshift_raw,
                lvlw_raw,
                stride,
            },
            HeadLevelCache {
                cls: cls_caches,
                reg: reg_caches,
                cls_out,
                reg_out,
                point_out,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the feature gradient.
    pub fn backward_level(&mut self, cache: &HeadLevelCache, grads: &LevelMaps) -> Result<Tensor> {
        let mut reg_raw_grad = grads.reg.clone();
        reg_raw_grad.scale(grads.stride as f64);
        let point_grad = concat_channels(&grads.point_blocks())?;

        let g_cls_feat = self
            .cls_out
            .backward(&cache.cls_out, &grads.cls, true)?
            .expect("input grad");
        let mut g_reg_feat = self
            .reg_out
            .backward(&cache.reg_out, &reg_raw_grad, true)?
            .expect("input grad");
        g_reg_feat.add_assign(
            &self
                .point_out
                .backward(&cache.point_out, &point_grad, true)?
                .expect("input grad"),
        )?;

        let mut feature_grad = tower_backward(&mut self.cls_tower, &cache.cls, g_cls_feat)?;
        feature_grad.add_assign(&tower_backward(&mut self.reg_tower, &cache.reg, g_reg_feat)?)?;
        Ok(feature_grad)
    }
}

fn tower_backward(convs: &mut [Conv2d], caches: &[(ConvCache, Tensor)], mut g: Tensor) -> Result<Tensor> {
    for (conv, (cache, out)) in convs.iter_mut().zip(caches).rev() {
        relu_backward_inplace(out, &mut g);
        g = conv.backward(cache, &g, true)?.expect("input grad");
    }
    Ok(g)
}

/// Splits a `[C,H,W]` tensor into consecutive channel blocks.
pub fn split_channels(t: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let (c, h, w) = t.chw()?;
    let total: usize = sizes.iter().sum();
    if total != c {
        return Err(crate::Error::Shape {
            op: "split_channels",
            dim: "channels".into(),
            expected: total,
            got: c,
        });
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        let data = t.data()[start * h * w..(start + s) * h * w].to_vec();
        out.push(if s == 0 {
            Tensor::zeros(&[0, h, w])
        } else {
            Tensor::from_vec(&[s, h, w], data)?
        });
        start += s;
    }
    Ok(out)
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let (_, h, w) = parts[0].chw()?;
    let mut data = Vec::new();
    let mut c = 0;
    for p in parts {
        data.extend_from_slice(p.data());
        c += p.shape()[0];
    }
    Tensor::from_vec(&[c, h, w], data)
}
