//! The optimization loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::loss::{image_loss, normalize_batch, LossConfig, LossTerms};
use super::scene::{generate_scene, mix_seed, Scene};
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::tensor::optim::{clip_grad_norm, Sgd};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_reg2: f64,
    pub total: f64,
}

impl LogRecord {
    fn new(iter: usize, t: LossTerms) -> Self {
        LogRecord {
            iter,
            l_cls: t.l_cls,
            l_reg: t.l_reg,
            l_reg2: t.l_reg2,
            total: t.total,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub log: Vec<LogRecord>,
    pub checkpoint: Option<PathBuf>,
}

/// Step schedule: ×0.1 after 2/3 and again after 8/9 of the iterations.
pub fn learning_rate(base: f64, iter: usize, iters: usize) -> f64 {
    let mut lr = base;
    if 3 * iter >= 2 * iters {
        lr *= 0.1;
    }
    if 9 * iter >= 8 * iters {
        lr *= 0.1;
    }
    lr
}

/// Scene `b` of the batch at iteration `iter` of the training stream.
pub fn training_scene(cfg: &TrainConfig, iter: usize, b: usize) -> Result<Scene> {
    generate_scene(mix_seed(cfg.seed, (iter * cfg.batch + b) as u64), &cfg.scene_config())
}

/// Loss of a model on a fixed scene set, normalized over the set as one batch.
pub fn evaluate_loss(det: &Detector, scenes: &[Scene], cfg: &LossConfig) -> Result<LossTerms> {
    let mut images = Vec::with_capacity(scenes.len());
    for s in scenes {
        let out = det.predict(&s.image)?;
        images.push(image_loss(&out, &s.gt, cfg.focal));
    }
    Ok(normalize_batch(&mut images, cfg))
}

/// One forward/backward pass over a batch; accumulates gradients into the
/// detector's parameters and returns the loss terms.
pub fn accumulate_gradients(det: &mut Detector, scenes: &[Scene], cfg: &LossConfig) -> Result<LossTerms> {
    let mut passes = Vec::with_capacity(scenes.len());
    let mut images = Vec::with_capacity(scenes.len());
    for s in scenes {
        let (out, cache) = det.forward(&s.image)?;
        images.push(image_loss(&out, &s.gt, cfg.focal));
        passes.push((out, cache));
    }
    let terms = normalize_batch(&mut images, cfg);
    if !terms.total.is_finite() {
        return Ok(terms);
    }
    for ((out, cache), img) in passes.iter().zip(&images) {
        det.backward(cache, out, &img.grads)?;
    }
    Ok(terms)
}

fn save_to(det: &Detector, dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    det.save(&path)?;
    Ok(path)
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

/// Trains from the seeded initialization, calling `on_log` after every
/// iteration. With `out_dir` set, writes the config, the JSONL log and the
/// final checkpoint there.
pub fn train_with(cfg: &TrainConfig, mut on_log: impl FnMut(&LogRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let loss_cfg = cfg.loss_config();
    let mut det = Detector::new(cfg.model_config(), cfg.seed)?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);

    let mut log_file = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
            Some(BufWriter::new(File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };
    let fallback_dir = std::env::temp_dir();
    let ckpt_dir = cfg.out_dir.as_deref().unwrap_or(&fallback_dir);

    let mut log = Vec::with_capacity(cfg.iters);
    let mut last_good = det.clone();
    for iter in 0..cfg.iters {
        let scenes = (0..cfg.batch)
            .map(|b| training_scene(cfg, iter, b))
            .collect::<Result<Vec<_>>>()?;
        det.zero_grad();
        let diverged = |det: &Detector| -> Result<Error> {
            let checkpoint = save_to(det, ckpt_dir, LAST_GOOD_FILE)?;
            Ok(Error::Diverged { iter, checkpoint })
        };
        let terms = match accumulate_gradients(&mut det, &scenes, &loss_cfg) {
            Ok(t) if t.total.is_finite() => t,
            Ok(_) | Err(Error::NonFinite { .. }) => return Err(diverged(&last_good)?),
            Err(e) => return Err(e),
        };
        let record = LogRecord::new(iter, terms);
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
        }
        on_log(&record);
        log.push(record);

        last_good.clone_from(&det);
        if cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut det.params_mut(), cfg.clip_norm);
        }
        sgd.lr = learning_rate(cfg.lr, iter, cfg.iters);
        let step = sgd.step(&mut det.params_mut());
        let finite = det.params().iter().all(|p| p.value.is_finite());
        if step.is_err() || !finite {
            return Err(diverged(&last_good)?);
        }
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    let checkpoint = match &cfg.out_dir {
        Some(dir) => Some(save_to(&det, dir, CHECKPOINT_FILE)?),
        None => None,
    };
    Ok(TrainOutcome {
        detector: det,
        log,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(iters: usize) -> TrainConfig {
        TrainConfig {
            iters,
            image_size: 32,
            max_object: 16,
            batch: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_steps() {
        assert_eq!(learning_rate(0.01, 0, 90), 0.01);
        assert!((learning_rate(0.01, 60, 90) - 0.001).abs() < 1e-18);
        assert!((learning_rate(0.01, 80, 90) - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let out = train(&tiny(0)).unwrap();
        let init = Detector::new(tiny(0).model_config(), 0).unwrap();
        for (a, b) in out.detector.params().iter().zip(init.params()) {
            assert_eq!(a.value, b.value);
        }
        assert!(out.log.is_empty());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = train(&tiny(3)).unwrap();
        let b = train(&tiny(3)).unwrap();
        for (x, y) in a.detector.params().iter().zip(b.detector.params()) {
            assert!(x.value.data().iter().zip(y.value.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn writes_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            out_dir: Some(dir.path().to_path_buf()),
            ..tiny(2)
        };
        let out = train(&cfg).unwrap();
        let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, out.log);
        let back = Detector::load(&out.checkpoint.unwrap()).unwrap();
        assert_eq!(back.params()[0].value, out.detector.params()[0].value);
    }

    #[test]
    fn divergence_reports_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            lr: 1e30,
            out_dir: Some(dir.path().to_path_buf()),
            ..tiny(20)
        };
        match train(&cfg) {
            Err(Error::Diverged { checkpoint, .. }) => {
                let det = Detector::load(&checkpoint).unwrap();
                assert!(det.params().iter().all(|p| p.value.is_finite()));
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
        }
    }
}
