use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use dpdet::analysis::accuracy::{accuracy_maps_from_view, best_location_histogram, DenseView};
use dpdet::analysis::render::{overlays_for, read_ppm, render_heatmap, scene_image, write_ppm};
use dpdet::analysis::{point_distance_distribution, AnalysisParams, DistanceParams, HistogramParams, TARGETS};
use dpdet::eval::io::{load_dataset, save_dataset, write_detections, write_report};
use dpdet::eval::{evaluate, postprocess, DecodeParams};
use dpdet::gradcheck::{run_all, run_op};
use dpdet::train::scene::held_out_set;
use dpdet::train::{train_with, SceneConfig, TrainConfig};
use dpdet::{Detector, Mode};

#[derive(Parser)]
#[command(name = "dpdet", version, about = "Toy dense detector with decoupled prediction collection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a held-out scene dataset (PPM images plus gt.jsonl).
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 3)]
        max_objects: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
    },
    /// Train from a config file; writes config, log and checkpoint to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config (default `run`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect on a dataset and write an AP report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write detections as JSONL.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Accuracy maps, best-location histograms and point distances.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        level: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        /// Heatmaps are written for the objects of this many images.
        #[arg(long, default_value_t = 4)]
        max_map_images: usize,
    },
    /// Draw detections and their points on one image.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        score_thresh: f64,
    },
    /// Train and evaluate one head mode.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Mode,
        #[arg(long, default_value_t = 200)]
        eval_count: usize,
        /// Default: `<out_dir>/ablate-<mode>`, or `ablate-<mode>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

fn progress(every: usize) -> impl FnMut(&dpdet::train::LogRecord) {
    move |r| {
        if (r.iter + 1) % every == 0 {
            eprintln!("iter {} total {:.4} cls {:.4} reg {:.4} reg2 {:.4}", r.iter + 1, r.total, r.l_cls, r.l_reg, r.l_reg2);
        }
    }
}

fn gen_data(seed: u64, count: usize, out: &Path, cfg: SceneConfig) -> dpdet::Result<()> {
    let scenes = held_out_set(seed, count, &cfg)?;
    save_dataset(out, &scenes)?;
    let objects: usize = scenes.iter().map(|s| s.gt.len()).sum();
    print_json(&json!({"images": count, "objects": objects, "out": out}));
    Ok(())
}

fn train(config: &Path, out: Option<PathBuf>) -> dpdet::Result<()> {
    let mut cfg = TrainConfig::from_file(config)?;
    cfg.out_dir = Some(out.or(cfg.out_dir).unwrap_or_else(|| PathBuf::from("run")));
    let outcome = train_with(&cfg, progress(100))?;
    let last = outcome.log.last().map(|r| r.total);
    print_json(&json!({
        "iters": outcome.log.len(),
        "first_loss": outcome.log.first().map(|r| r.total),
        "final_loss": last,
        "checkpoint": outcome.checkpoint,
    }));
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, report: &Path, detections: Option<&Path>) -> dpdet::Result<()> {
    let det = Detector::load(ckpt)?;
    let ds = load_dataset(data)?;
    let (rep, dets) = evaluate(&det, &ds.images, &ds.gts, &DecodeParams::default())?;
    write_report(report, &rep)?;
    if let Some(path) = detections {
        write_detections(BufWriter::new(File::create(path)?), &dets, &ds.ids)?;
    }
    print_json(&json!({"AP": rep.ap, "AP50": rep.ap50, "AP75": rep.ap75, "images": ds.ids.len()}));
    Ok(())
}

fn gradcheck(op: Option<&str>, seed: u64) -> dpdet::Result<bool> {
    let results = match op {
        Some(op) => vec![run_op(op, seed)?],
        None => run_all(seed)?,
    };
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        print_json(&json!({
            "op": r.op,
            "max_rel_err": r.max_rel_err,
            "checked": r.checked,
            "skipped": r.skipped,
            "passed": r.passed(),
        }));
    }
    Ok(ok)
}

fn analyze(
    ckpt: &Path,
    data: &Path,
    out: &Path,
    params: AnalysisParams,
    max_map_images: usize,
) -> dpdet::Result<()> {
    let det = Detector::load(ckpt)?;
    let ds = load_dataset(data)?;
    let maps_dir = out.join("maps");
    std::fs::create_dir_all(&maps_dir)?;
    let mut all_maps = Vec::new();
    let mut skipped = Vec::new();
    for (k, (image, gt)) in ds.images.iter().zip(&ds.gts).enumerate() {
        let view = DenseView::from_output(&det.predict(image)?);
        let a = accuracy_maps_from_view(&view, gt, &params)?;
        for &g in &a.skipped {
            eprintln!("warning: image {} gt {g}: no grid in the analyzed region, skipped", ds.ids[k]);
            skipped.push(json!({"image_id": ds.ids[k], "gt": g}));
        }
        if k < max_map_images {
            for m in &a.maps {
                for (t, name) in TARGETS.iter().enumerate() {
                    let path = maps_dir.join(format!("{:06}_gt{}_{name}.ppm", ds.ids[k], m.gt_index));
                    render_heatmap(m.target(t), m.grid.height, m.grid.width, &path)?;
                }
            }
        }
        all_maps.extend(a.maps);
    }
    let hist = best_location_histogram(&all_maps, &HistogramParams::default());
    for (t, name) in TARGETS.iter().enumerate() {
        let h = &hist.histograms[t];
        let counts: Vec<f64> = h.counts.iter().map(|&c| c as f64).collect();
        render_heatmap(&counts, h.bins, h.bins, &out.join(format!("best_{name}.ppm")))?;
    }
    let distances = point_distance_distribution(&det, &ds.images, &ds.gts, &DistanceParams::default())?;
    let bias = hist.boundary_bias();
    let histograms: serde_json::Map<String, serde_json::Value> = TARGETS
        .iter()
        .zip(&hist.histograms)
        .map(|(n, h)| (n.to_string(), serde_json::to_value(h).expect("serializable")))
        .collect();
    let summary = json!({
        "images": ds.ids.len(),
        "objects_analyzed": hist.objects,
        "skipped": skipped,
        "params": params,
        "boundary_bias": {"l": bias[0], "t": bias[1], "r": bias[2], "b": bias[3]},
        "best_location_histograms": histograms,
        "point_distances": distances,
    });
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(out.join("analysis.json"), text)?;
    print_json(&json!({
        "objects_analyzed": hist.objects,
        "boundary_bias": summary["boundary_bias"],
        "median_distance": distances.iter().map(|d| json!({"config": d.config, "median": d.median})).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn render(ckpt: &Path, image: &Path, out: &Path, score_thresh: f64) -> dpdet::Result<()> {
    let det = Detector::load(ckpt)?;
    let img = read_ppm(image)?;
    let head = det.predict(&img)?;
    let p = DecodeParams::default();
    let dets: Vec<_> = postprocess(&head, &p)
        .into_iter()
        .filter(|d| d.score >= score_thresh)
        .collect();
    let overlays = overlays_for(&head, &dets);
    write_ppm(out, &scene_image(&img, &dets, &overlays)?)?;
    print_json(&json!({"detections": dets, "out": out}));
    Ok(())
}

fn ablate(config: &Path, mode: Mode, eval_count: usize, out: Option<PathBuf>) -> dpdet::Result<()> {
    let mut cfg = TrainConfig::from_file(config)?;
    cfg.mode = mode;
    let dir_name = format!("ablate-{mode}");
    let dir = out.unwrap_or_else(|| match &cfg.out_dir {
        Some(d) => d.join(&dir_name),
        None => PathBuf::from(&dir_name),
    });
    cfg.out_dir = Some(dir.clone());
    let outcome = train_with(&cfg, progress(100))?;
    let scenes = held_out_set(cfg.seed, eval_count, &cfg.scene_config())?;
    let images: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
    let gts: Vec<_> = scenes.iter().map(|s| s.gt.clone()).collect();
    let (rep, _) = evaluate(&outcome.detector, &images, &gts, &DecodeParams::default())?;
    write_report(&dir.join("report.json"), &rep)?;
    print_json(&json!({"mode": mode, "AP": rep.ap, "AP50": rep.ap50, "AP75": rep.ap75, "out": dir}));
    Ok(())
}

fn run(cli: Cli) -> dpdet::Result<bool> {
    match cli.command {
        Command::GenData {
            seed,
            count,
            out,
            image_size,
            max_objects,
            classes,
        } => {
            let cfg = SceneConfig {
                width: image_size,
                height: image_size,
                max_objects,
                classes,
                ..SceneConfig::default()
            };
            gen_data(seed, count, &out, cfg)?;
        }
        Command::Train { config, out } => train(&config, out)?,
        Command::Eval {
            ckpt,
            data,
            report,
            detections,
        } => eval(&ckpt, &data, &report, detections.as_deref())?,
        Command::Gradcheck { op, seed } => return gradcheck(op.as_deref(), seed),
        Command::Analyze {
            ckpt,
            data,
            out,
            level,
            margin,
            max_map_images,
        } => analyze(&ckpt, &data, &out, AnalysisParams { level, margin }, max_map_images)?,
        Command::Render {
            ckpt,
            image,
            out,
            score_thresh,
        } => render(&ckpt, &image, &out, score_thresh)?,
        Command::Ablate {
            config,
            mode,
            eval_count,
            out,
        } => ablate(&config, mode, eval_count, out)?,
    }
    Ok(true)
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let line = json!({"error": kind, "message": message});
    let _ = writeln!(std::io::stderr(), "{line}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => fail("gradcheck_failed", "at least one operation exceeded the tolerance"),
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
