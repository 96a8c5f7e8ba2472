//! Line-oriented `key = value` training configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::loss::{FocalParams, LossConfig};
use super::scene::SceneConfig;
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub iters: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_semantic: usize,
    pub classes: usize,
    pub image_size: usize,
    pub max_objects: usize,
    pub levels: usize,
    pub neighbor_set: Vec<i64>,
    pub out_dir: Option<PathBuf>,
    pub mode: Mode,
    /// Images per optimizer step.
    pub batch: usize,
    pub min_object: usize,
    pub max_object: usize,
    /// Gradient L2-norm ceiling applied before each step; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            iters: 2000,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda1: 2.0,
            lambda2: 0.5,
            n_semantic: 9,
            classes: 3,
            image_size: 64,
            max_objects: 3,
            levels: 3,
            neighbor_set: vec![-1, 0],
            out_dir: None,
            mode: Mode::Decoupled,
            batch: 8,
            min_object: 8,
            max_object: 32,
            clip_norm: 5.0,
        }
    }
}

const KEYS: [&str; 19] = [
    "seed",
    "iters",
    "lr",
    "momentum",
    "weight_decay",
    "lambda1",
    "lambda2",
    "n_semantic",
    "classes",
    "image_size",
    "max_objects",
    "levels",
    "neighbor_set",
    "out_dir",
    "mode",
    "batch",
    "min_object",
    "max_object",
    "clip_norm",
];

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        reason: format!("{key}: cannot parse `{v}`"),
    })
}

pub fn parse_neighbor_set(v: &str) -> std::result::Result<Vec<i64>, String> {
    let v = v.trim().trim_start_matches('[').trim_end_matches(']');
    v.split(',')
        .map(|s| s.trim().parse::<i64>().map_err(|_| format!("bad level offset `{}`", s.trim())))
        .collect()
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                reason: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let known = KEYS.iter().find(|k| **k == key).ok_or_else(|| Error::Config {
                line,
                reason: format!("unknown key `{key}`"),
            })?;
            if seen.contains(known) {
                return Err(Error::Config {
                    line,
                    reason: format!("duplicate key `{key}`"),
                });
            }
            seen.push(known);
            match key {
                "seed" => cfg.seed = parse_num(line, key, value)?,
                "iters" => cfg.iters = parse_num(line, key, value)?,
                "lr" => cfg.lr = parse_num(line, key, value)?,
                "momentum" => cfg.momentum = parse_num(line, key, value)?,
                "weight_decay" => cfg.weight_decay = parse_num(line, key, value)?,
                "lambda1" => cfg.lambda1 = parse_num(line, key, value)?,
                "lambda2" => cfg.lambda2 = parse_num(line, key, value)?,
                "n_semantic" => cfg.n_semantic = parse_num(line, key, value)?,
                "classes" => cfg.classes = parse_num(line, key, value)?,
                "image_size" => cfg.image_size = parse_num(line, key, value)?,
                "max_objects" => cfg.max_objects = parse_num(line, key, value)?,
                "levels" => cfg.levels = parse_num(line, key, value)?,
                "neighbor_set" => {
                    cfg.neighbor_set = parse_neighbor_set(value).map_err(|reason| Error::Config { line, reason })?
                }
                "out_dir" => cfg.out_dir = Some(PathBuf::from(value)),
                "mode" => {
                    cfg.mode = value.parse().map_err(|e: Error| Error::Config {
                        line,
                        reason: e.to_string(),
                    })?
                }
                "batch" => cfg.batch = parse_num(line, key, value)?,
                "min_object" => cfg.min_object = parse_num(line, key, value)?,
                "max_object" => cfg.max_object = parse_num(line, key, value)?,
                "clip_norm" => cfg.clip_norm = parse_num(line, key, value)?,
                _ => unreachable!("key list and match agree"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::Config { line: 0, reason });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad("weight_decay and lambdas must be non-negative".into());
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("clip_norm must be finite and >= 0, got {}", self.clip_norm));
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        let stride = crate::backbone::FINEST_STRIDE << self.levels.saturating_sub(1);
        if self.image_size == 0 || self.image_size % stride != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of the coarsest stride {stride}",
                self.image_size
            ));
        }
        self.model_config().validate()?;
        self.scene_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            classes: self.classes,
            n_semantic: self.n_semantic,
            levels: self.levels,
            neighbor_offsets: self.neighbor_set.clone(),
            mode: self.mode,
            ..ModelConfig::default()
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            width: self.image_size,
            height: self.image_size,
            max_objects: self.max_objects,
            classes: self.classes,
            min_size: self.min_object,
            max_size: self.max_object,
            ..SceneConfig::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            focal: FocalParams::default(),
        }
    }

    /// Renders the config back to the file format.
    pub fn to_text(&self) -> String {
        let offsets: Vec<String> = self.neighbor_set.iter().map(|o| o.to_string()).collect();
        let mut s = format!(
            "seed = {}\niters = {}\nlr = {}\nmomentum = {}\nweight_decay = {}\nlambda1 = {}\nlambda2 = {}\n\
             n_semantic = {}\nclasses = {}\nimage_size = {}\nmax_objects = {}\nlevels = {}\n\
             neighbor_set = {}\nmode = {}\nbatch = {}\nmin_object = {}\nmax_object = {}\nclip_norm = {}\n",
            self.seed,
            self.iters,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.lambda1,
            self.lambda2,
            self.n_semantic,
            self.classes,
            self.image_size,
            self.max_objects,
            self.levels,
            offsets.join(","),
            self.mode,
            self.batch,
            self.min_object,
            self.max_object,
            self.clip_norm,
        );
        if let Some(d) = &self.out_dir {
            s.push_str(&format!("out_dir = {}\n", d.display()));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let text = "# toy\nseed = 3\niters = 10\nlr = 0.02\nmomentum = 0.8\nweight_decay = 0\n\
                    lambda1 = 1.5\nlambda2 = 0.25\nn_semantic = 4\nclasses = 2\nimage_size = 32\n\
                    max_objects = 2\nlevels = 2\nneighbor_set = -1, 0\nout_dir = /tmp/x\n\
                    mode = loc-only\nbatch = 3\nmin_object = 8\nmax_object = 16\nclip_norm = 2.5\n";
        let c = TrainConfig::parse(text).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.neighbor_set, vec![-1, 0]);
        assert_eq!(c.mode, Mode::LocOnly);
        assert_eq!(c.out_dir, Some(PathBuf::from("/tmp/x")));
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_names_line() {
        let err = TrainConfig::parse("seed = 1\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(TrainConfig::parse("seed = 1\nseed = 2\n").is_err());
        assert!(TrainConfig::parse("seed 1\n").is_err());
        assert!(TrainConfig::parse("iters = many\n").is_err());
        assert!(TrainConfig::parse("neighbor_set = -1,x\n").is_err());
        assert!(TrainConfig::parse("image_size = 60\n").is_err());
        assert!(TrainConfig::parse("neighbor_set = -1\n").is_err());
    }

    #[test]
    fn empty_text_is_default() {
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
    }
}
