//! The full detector: backbone, head, collection and checkpoint IO.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneCache};
use crate::error::{Error, Result};
use crate::head::points::semantic_grid_side;
use crate::head::{
    collect_grid, collect_grid_backward, CollectConfig, GridGrad, GridIndex, GridPrediction, Head,
    HeadLevelCache, LevelMaps, PointChannels,
};
use crate::tensor::checkpoint;
use crate::tensor::sample::Taps;
use crate::tensor::{Param, Tensor};

/// Which predictions are decoupled (collected away from the grid).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Boundary points for localization, semantic points for classification.
    Decoupled,
    /// Forced baseline: zero boundary shifts (coarse-edge midpoints) on the
    /// grid's own level and one classification point at the grid center.
    Coupled,
    /// Only localization decoupled.
    LocOnly,
    /// Only classification decoupled.
    ClsOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Coupled, Mode::Decoupled, Mode::LocOnly, Mode::ClsOnly];

    pub fn loc_dynamic(self) -> bool {
        matches!(self, Mode::Decoupled | Mode::LocOnly)
    }

    pub fn cls_dynamic(self) -> bool {
        matches!(self, Mode::Decoupled | Mode::ClsOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Decoupled => "decoupled",
            Mode::Coupled => "coupled",
            Mode::LocOnly => "loc-only",
            Mode::ClsOnly => "cls-only",
        }
    }

    fn code(self) -> f64 {
        Mode::ALL.iter().position(|&m| m == self).expect("listed") as f64
    }

    fn from_code(v: f64) -> Result<Self> {
        Mode::ALL
            .get(v as usize)
            .copied()
            .filter(|_| v.fract() == 0.0 && v >= 0.0)
            .ok_or_else(|| Error::Checkpoint(format!("unknown mode code {v}")))
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown mode `{s}` (coupled, decoupled, loc-only, cls-only)")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    /// Requested semantic point count; a perfect square.
    pub n_semantic: usize,
    pub levels: usize,
    /// Level offsets relative to the grid's own level, e.g. `[-1, 0]`.
    pub neighbor_offsets: Vec<i64>,
    pub mode: Mode,
    pub channels: usize,
    pub stem_channels: usize,
    pub tower_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 3,
            n_semantic: 9,
            levels: 3,
            neighbor_offsets: vec![-1, 0],
            mode: Mode::Decoupled,
            channels: 32,
            stem_channels: 16,
            tower_depth: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        semantic_grid_side(self.n_semantic)?;
        let bad = |reason: String| Err(Error::invalid("model_config", reason));
        if self.classes == 0 {
            return bad("classes must be >= 1".into());
        }
        if self.levels == 0 {
            return bad("levels must be >= 1".into());
        }
        if !self.neighbor_offsets.contains(&0) {
            return bad(format!("neighbor set {:?} must contain the grid's own level (0)", self.neighbor_offsets));
        }
        let mut sorted = self.neighbor_offsets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.neighbor_offsets.len() {
            return bad(format!("neighbor set {:?} has duplicates", self.neighbor_offsets));
        }
        if self.channels == 0 || self.stem_channels == 0 {
            return bad("channel counts must be >= 1".into());
        }
        Ok(())
    }

    /// Semantic point count actually used (1 when classification is coupled).
    pub fn effective_semantic(&self) -> usize {
        if self.mode.cls_dynamic() {
            self.n_semantic
        } else {
            1
        }
    }

    pub fn effective_offsets(&self) -> Vec<i64> {
        if self.mode.loc_dynamic() {
            self.neighbor_offsets.clone()
        } else {
            vec![0]
        }
    }

    pub fn collect_config(&self) -> CollectConfig {
        CollectConfig {
            classes: self.classes,
            semantic: self.effective_semantic(),
            neighbor_offsets: self.effective_offsets(),
            loc_dynamic: self.mode.loc_dynamic(),
            cls_dynamic: self.mode.cls_dynamic(),
        }
    }
}

/// Dense maps of every level plus one collected prediction per grid,
/// ordered by level, then row, then column.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub maps: Vec<LevelMaps>,
    pub grids: Vec<GridPrediction>,
    pub image_height: usize,
    pub image_width: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    backbone: BackboneCache,
    head: Vec<HeadLevelCache>,
}

impl ForwardCache {
    pub fn pyramid(&self) -> &crate::backbone::Pyramid {
        &self.backbone.pyramid
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub head: Head,
    collect: CollectConfig,
}

impl Detector {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config.stem_channels, config.channels, config.levels, &mut rng);
        let point_channels = PointChannels {
            semantic: config.effective_semantic(),
            levels: config.effective_offsets().len(),
        };
        let head = Head::new(config.channels, config.tower_depth, config.classes, point_channels, &mut rng);
        let collect = config.collect_config();
        Ok(Detector {
            config,
            backbone,
            head,
            collect,
        })
    }

    pub fn collect_config(&self) -> &CollectConfig {
        &self.collect
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.backbone.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.backbone.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Dense maps per level from an image.
    pub fn dense_forward(&self, image: &Tensor) -> Result<(Vec<LevelMaps>, ForwardCache)> {
        let bb = self.backbone.forward(image)?;
        let mut maps = Vec::with_capacity(bb.pyramid.levels.len());
        let mut head = Vec::with_capacity(bb.pyramid.levels.len());
        for level in &bb.pyramid.levels {
            let (m, c) = self.head.forward_level(&level.features, level.stride)?;
            if !m.point_blocks().iter().chain([&&m.reg, &&m.cls]).all(|t| t.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("head maps at stride {}", level.stride),
                });
            }
            maps.push(m);
            head.push(c);
        }
        Ok((maps, ForwardCache { backbone: bb, head }))
    }

    /// Collects a prediction for every grid of every level.
    pub fn collect_all(&self, maps: Vec<LevelMaps>, image_height: usize, image_width: usize) -> Result<HeadOutput> {
        let mut grids = Vec::with_capacity(maps.iter().map(|m| m.height() * m.width()).sum());
        for (level, m) in maps.iter().enumerate() {
            for i in 0..m.height() {
                for j in 0..m.width() {
                    grids.push(collect_grid(&maps, &self.collect, GridIndex { level, i, j })?);
                }
            }
        }
        Ok(HeadOutput {
            maps,
            grids,
            image_height,
            image_width,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<(HeadOutput, ForwardCache)> {
        let (_, h, w) = image.chw()?;
        let (maps, cache) = self.dense_forward(image)?;
        Ok((self.collect_all(maps, h, w)?, cache))
    }

    pub fn predict(&self, image: &Tensor) -> Result<HeadOutput> {
        self.forward(image).map(|(o, _)| o)
    }

    /// Gradient of the map tensors for the given per-grid upstream gradients.
    pub fn collect_backward(&self, out: &HeadOutput, grads: &[GridGrad]) -> Result<Vec<LevelMaps>> {
        if grads.len() != out.grids.len() {
            return Err(Error::Shape {
                op: "collect_backward",
                dim: "grid count".into(),
                expected: out.grids.len(),
                got: grads.len(),
            });
        }
        let mut map_grads: Vec<LevelMaps> = out.maps.iter().map(LevelMaps::zeros_like).collect();
        for (pred, g) in out.grids.iter().zip(grads) {
            collect_grid_backward(&out.maps, &self.collect, pred, g, &mut map_grads)?;
        }
        Ok(map_grads)
    }

    /// Accumulates parameter gradients from per-map gradients.
    pub fn dense_backward(&mut self, cache: &ForwardCache, map_grads: &[LevelMaps]) -> Result<()> {
        let mut feature_grads = Vec::with_capacity(map_grads.len());
        for (c, g) in cache.head.iter().zip(map_grads) {
            feature_grads.push(self.head.backward_level(c, g)?);
        }
        self.backbone.backward(&cache.backbone, feature_grads)
    }

    /// Accumulates parameter gradients from per-grid upstream gradients.
    pub fn backward(&mut self, cache: &ForwardCache, out: &HeadOutput, grads: &[GridGrad]) -> Result<()> {
        let map_grads = self.collect_backward(out, grads)?;
        self.dense_backward(cache, &map_grads)
    }

    /// Hash of every discrete branch taken by a forward pass (ReLU signs and
    /// bilinear support cells). Two parameter settings with the same key lie
    /// in the same smooth piece of the network function.
    pub fn branch_key(&self, cache: &ForwardCache, out: &HeadOutput) -> u64 {
        let mut h = DefaultHasher::new();
        let mut sign_bits = |t: &Tensor| {
            for chunk in t.data().chunks(64) {
                let mut bits = 0u64;
                for (k, v) in chunk.iter().enumerate() {
                    if *v > 0.0 {
                        bits |= 1 << k;
                    }
                }
                bits.hash(&mut h);
            }
        };
        sign_bits(cache.backbone.stem_hidden());
        for l in &cache.backbone.pyramid.levels {
            sign_bits(&l.features);
        }
        for hc in &cache.head {
            for t in hc.activations() {
                sign_bits(t);
            }
        }
        for g in &out.grids {
            let mut taps = |lev: usize, x: f64, y: f64| {
                let m = &out.maps[lev];
                let s = m.stride as f64;
                if let Ok(t) = Taps::new(m.height(), m.width(), x / s - 0.5, y / s - 0.5) {
                    t.index.hash(&mut h);
                    for d in t.dweight_dx.iter().chain(&t.dweight_dy) {
                        (*d == 0.0).hash(&mut h);
                    }
                }
            };
            for p in &g.points.boundary {
                for &lev in &g.points.levels {
                    taps(lev, p.x, p.y);
                }
            }
            for p in &g.points.semantic {
                taps(g.grid.level, p.x, p.y);
            }
        }
        h.finish()
    }

    fn meta_records(&self) -> Vec<(String, Tensor)> {
        let c = &self.config;
        let scalar = |v: f64| Tensor::from_vec(&[1], vec![v]).expect("scalar");
        vec![
            ("meta.classes".into(), scalar(c.classes as f64)),
            ("meta.n_semantic".into(), scalar(c.n_semantic as f64)),
            ("meta.levels".into(), scalar(c.levels as f64)),
            ("meta.mode".into(), scalar(c.mode.code())),
            ("meta.channels".into(), scalar(c.channels as f64)),
            ("meta.stem_channels".into(), scalar(c.stem_channels as f64)),
            ("meta.tower_depth".into(), scalar(c.tower_depth as f64)),
            (
                "meta.neighbor_offsets".into(),
                Tensor::from_vec(
                    &[c.neighbor_offsets.len()],
                    c.neighbor_offsets.iter().map(|&o| o as f64).collect(),
                )
                .expect("non-empty offsets"),
            ),
        ]
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut r = self.meta_records();
        r.extend(self.params().into_iter().map(|p| (p.name.clone(), p.value.clone())));
        r
    }

    pub fn write_checkpoint<W: std::io::Write>(&self, out: W) -> Result<()> {
        let records = self.to_records();
        let refs: Vec<(&str, &Tensor)> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        checkpoint::write_records(out, &refs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn from_records(records: Vec<(String, Tensor)>) -> Result<Self> {
        let find = |name: &str| -> Result<&Tensor> {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
        };
        let scalar = |name: &str| -> Result<usize> {
            let v = find(name)?.data()[0];
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Checkpoint(format!("{name} = {v} is not a count")));
            }
            Ok(v as usize)
        };
        let config = ModelConfig {
            classes: scalar("meta.classes")?,
            n_semantic: scalar("meta.n_semantic")?,
            levels: scalar("meta.levels")?,
            mode: Mode::from_code(find("meta.mode")?.data()[0])?,
            channels: scalar("meta.channels")?,
            stem_channels: scalar("meta.stem_channels")?,
            tower_depth: scalar("meta.tower_depth")?,
            neighbor_offsets: find("meta.neighbor_offsets")?.data().iter().map(|&v| v as i64).collect(),
        };
        let mut det = Detector::new(config, 0)?;
        for p in det.params_mut() {
            let t = find(&p.name)?;
            p.value
                .check_same_shape("checkpoint", t)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", p.name)))?;
            p.value = t.clone();
        }
        Ok(det)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(checkpoint::load(path)?)
    }
}
