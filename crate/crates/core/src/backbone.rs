//! Tiny convolutional pyramid standing in for a backbone with FPN.
//!
//! Two stride-2 stem convolutions reach stride 4 (the finest level); every
//! further level is one stride-2 convolution of the previous one. All
//! activations are ReLU and every level has the same channel count.

use rand::Rng;

use crate::error::{Error, Result};
use crate::head::normal_fill;
use crate::tensor::conv::{Conv2d, ConvCache};
use crate::tensor::{relu_backward_inplace, relu_inplace, Param, Tensor};

pub const FINEST_STRIDE: usize = 4;

/// One pyramid level: features and their stride in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub features: Tensor,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<Level>,
}

impl Pyramid {
    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.stride).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: [Conv2d; 2],
    pub downs: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct BackboneCache {
    stem_caches: [ConvCache; 2],
    stem_hidden: Tensor,
    down_caches: Vec<ConvCache>,
    pub pyramid: Pyramid,
}

impl BackboneCache {
    /// Post-ReLU output of the first stem convolution.
    pub fn stem_hidden(&self) -> &Tensor {
        &self.stem_hidden
    }
}

impl Backbone {
    pub fn new<R: Rng>(stem_channels: usize, channels: usize, levels: usize, rng: &mut R) -> Self {
        let mut init = |mut c: Conv2d| {
            let std = (2.0 / c.fan_in() as f64).sqrt();
            normal_fill(&mut c.weight.value, std, rng);
            c
        };
        let stem = [
            init(Conv2d::new("backbone.stem.0", 3, stem_channels, 3, 2)),
            init(Conv2d::new("backbone.stem.1", stem_channels, channels, 3, 2)),
        ];
        let downs = (1..levels)
            .map(|i| init(Conv2d::new(&format!("backbone.down.{i}"), channels, channels, 3, 2)))
            .collect();
        Backbone { stem, downs }
    }

    pub fn levels(&self) -> usize {
        self.downs.len() + 1
    }

    pub fn coarsest_stride(&self) -> usize {
        FINEST_STRIDE << self.downs.len()
    }

    pub fn strides(&self) -> Vec<usize> {
        (0..self.levels()).map(|i| FINEST_STRIDE << i).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.stem.iter().chain(&self.downs).flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.stem
            .iter_mut()
            .chain(self.downs.iter_mut())
            .flat_map(|c| c.params_mut())
            .collect()
    }

    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.chw()?;
        if c != 3 {
            return Err(Error::Shape {
                op: "backbone_forward",
                dim: "image channels".into(),
                expected: 3,
                got: c,
            });
        }
        let s = self.coarsest_stride();
        if h % s != 0 || w % s != 0 {
            let pad = |x: usize| (s - x % s) % s;
            return Err(Error::invalid(
                "backbone_forward",
                format!(
                    "image {h}x{w} not divisible by coarsest stride {s}; pad by {} rows and {} columns",
                    pad(h),
                    pad(w)
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Tensor) -> Result<BackboneCache> {
        self.check_input(image)?;
        let (mut h0, c0) = self.stem[0].forward(image)?;
        relu_inplace(&mut h0);
        let (mut f, c1) = self.stem[1].forward(&h0)?;
        relu_inplace(&mut f);
        let mut levels = vec![Level {
            features: f,
            stride: FINEST_STRIDE,
        }];
        let mut down_caches = Vec::with_capacity(self.downs.len());
        for (i, conv) in self.downs.iter().enumerate() {
            let (mut y, cache) = conv.forward(&levels[i].features)?;
            relu_inplace(&mut y);
            down_caches.push(cache);
            levels.push(Level {
                features: y,
                stride: FINEST_STRIDE << (i + 1),
            });
        }
        Ok(BackboneCache {
            stem_caches: [c0, c1],
            stem_hidden: h0,
            down_caches,
            pyramid: Pyramid { levels },
        })
    }

    /// Accumulates parameter gradients given one feature gradient per level.
    pub fn backward(&mut self, cache: &BackboneCache, mut level_grads: Vec<Tensor>) -> Result<()> {
        let levels = &cache.pyramid.levels;
        if level_grads.len() != levels.len() {
            return Err(Error::Shape {
                op: "backbone_backward",
                dim: "level count".into(),
                expected: levels.len(),
                got: level_grads.len(),
            });
        }
        for i in (1..levels.len()).rev() {
            let mut g = std::mem::replace(&mut level_grads[i], Tensor::zeros(&[1]));
            relu_backward_inplace(&levels[i].features, &mut g);
            let gin = self.downs[i - 1]
                .backward(&cache.down_caches[i - 1], &g, true)?
                .expect("input grad");
            level_grads[i - 1].add_assign(&gin)?;
        }
        let mut g = std::mem::replace(&mut level_grads[0], Tensor::zeros(&[1]));
        relu_backward_inplace(&levels[0].features, &mut g);
        let mut g = self.stem[1]
            .backward(&cache.stem_caches[1], &g, true)?
            .expect("input grad");
        relu_backward_inplace(&cache.stem_hidden, &mut g);
        self.stem[0].backward(&cache.stem_caches[0], &g, false)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn level_sizes_follow_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(16, 32, 3, &mut rng);
        let out = bb.forward(&Tensor::filled(&[3, 64, 64], 0.5)).unwrap();
        let dims: Vec<_> = out.pyramid.levels.iter().map(|l| l.features.chw().unwrap()).collect();
        assert_eq!(dims, vec![(32, 16, 16), (32, 8, 8), (32, 4, 4)]);
        assert_eq!(out.pyramid.strides(), vec![4, 8, 16]);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(16, 32, 3, &mut rng);
        let out = bb.forward(&Tensor::zeros(&[3, 32, 32])).unwrap();
        assert!(out.pyramid.levels.iter().all(|l| l.features.max_abs() == 0.0));
    }

    #[test]
    fn rejects_indivisible_size_with_padding_hint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = Backbone::new(16, 32, 3, &mut rng);
        let err = bb.forward(&Tensor::zeros(&[3, 60, 64])).unwrap_err();
        assert!(err.to_string().contains("pad by 4 rows"), "{err}");
    }
}
