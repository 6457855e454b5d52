//! The subcommands as library functions. Each writes its artifacts under
//! `cfg.out`, finishes with `manifest.txt` and returns a short report for
//! the terminal.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lfra_core::data::{augment, preprocess, split_train_val, Sample, TRAIN_FRACTION};
use lfra_core::gradcheck::run_suite;
use lfra_core::metrics::{binarize, evaluate_dataset, overlay_render, predict_sample, OverlayStyle};
use lfra_core::model::complexity::{complexity, layer_costs};
use lfra_core::model::{LfraNet, ABLATION_PRESETS};
use lfra_core::training::{fit, Trainer};
use log::info;

use crate::checkpoint::{self, load_checkpoint, BLOB_FILE, MANIFEST_FILE};
use crate::config::RunConfig;
use crate::dataset::{load_dir, write_gray, write_rgb, MASKS_DIR};
use crate::error::{Error, Result};
use crate::report::{metrics_csv, summary_text, train_log_csv, write_manifest, write_text};

pub const CONFIG_FILE: &str = "config.toml";
pub const TRAIN_LOG: &str = "logs/train.csv";
pub const CKPT_DIR: &str = "ckpt";

fn dataset_root(cfg: &RunConfig) -> Result<&Path> {
    cfg.dataset_root
        .as_deref()
        .ok_or_else(|| Error::Config("--dataset-root is required".into()))
}

fn preprocessed(samples: &[Sample], size: usize) -> Vec<Sample> {
    samples.iter().map(|s| preprocess(s, size)).collect()
}

fn check_size(size: usize, divisor: usize) -> Result<()> {
    if !size.is_multiple_of(divisor) {
        return Err(Error::Config(format!("size {size} is not a multiple of {divisor}")));
    }
    Ok(())
}

/// Preprocess, augment, split and fit. The best-validation weights are
/// written to `out/ckpt` once training ends; a run that fails before then
/// leaves no checkpoint.
pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let model_cfg = cfg.model_config()?;
    let size = cfg.target_size()?;
    check_size(size, model_cfg.required_divisor())?;
    let raw = load_dir(dataset_root(cfg)?, true)?;
    let base = preprocessed(&raw, size);
    let target = cfg.augment.or(cfg.dataset_spec()?.augmented).unwrap_or(base.len());
    let samples = augment(&base, target, cfg.seed)?;
    let (train, val) = split_train_val(&samples, TRAIN_FRACTION, cfg.seed)?;
    info!(
        "{} samples after augmentation: {} train, {} val",
        samples.len(),
        train.len(),
        val.len()
    );

    let net = LfraNet::<f32>::new(&model_cfg)?;
    let mut trainer = Trainer::new(net, cfg.train_config())?;
    let mut best = None;
    let log = fit(&mut trainer, &train, &val, |net, e| {
        info!(
            "epoch {} loss {:.6} val dice {:?} (best)",
            e.epoch, e.train_loss, e.val_dice
        );
        best = Some(checkpoint::encode(net));
        Ok(())
    })?;
    let (manifest, blob) = best.unwrap_or_else(|| checkpoint::encode(&trainer.net));

    let out = &cfg.out;
    let config_text = cfg.effective_toml()?;
    write_text(&out.join(CONFIG_FILE), &config_text)?;
    write_text(&out.join(TRAIN_LOG), &train_log_csv(&log))?;
    let ckpt = out.join(CKPT_DIR);
    checkpoint::save_encoded(&manifest, &blob, &ckpt)?;
    write_manifest(
        out,
        "train",
        cfg.seed,
        &config_text,
        &[
            PathBuf::from(CONFIG_FILE),
            PathBuf::from(TRAIN_LOG),
            Path::new(CKPT_DIR).join(MANIFEST_FILE),
            Path::new(CKPT_DIR).join(BLOB_FILE),
        ],
    )?;

    let mut report = format!("trained {} epochs on {} samples\n", log.len(), train.len());
    let best_val = log
        .iter()
        .filter_map(|e| e.val_dice)
        .fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))));
    if let Some(v) = best_val {
        let _ = writeln!(report, "best val dice {v:.6}");
    }
    let _ = writeln!(report, "checkpoint {}", ckpt.display());
    Ok(report)
}

fn overlay_name(id: &str) -> PathBuf {
    Path::new("overlays").join(format!("{id}.png"))
}

/// Metrics of a checkpoint on a labeled dataset: `metrics.csv`,
/// `summary.txt` and one overlay per image.
pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let net = load_checkpoint(&cfg.checkpoint_dir())?;
    let size = cfg.target_size()?;
    check_size(size, net.config.required_divisor())?;
    let samples = preprocessed(&load_dir(dataset_root(cfg)?, true)?, size);
    let report = evaluate_dataset(&net, &samples, cfg.threshold, cfg.fov_only)?;

    let out = &cfg.out;
    let summary = summary_text(&report, cfg.threshold, cfg.fov_only);
    write_text(&out.join("metrics.csv"), &metrics_csv(&report))?;
    write_text(&out.join("summary.txt"), &summary)?;
    let mut artifacts = vec![PathBuf::from("metrics.csv"), PathBuf::from("summary.txt")];
    fs::create_dir_all(out.join("overlays")).map_err(Error::io(out))?;
    for s in &samples {
        let pred = binarize(&predict_sample(&net, s)?, cfg.threshold);
        let img = overlay_render(&pred, &s.mask, &s.image, OverlayStyle::Extended)?;
        let rel = overlay_name(&s.id);
        write_rgb(&out.join(&rel), &img)?;
        artifacts.push(rel);
    }
    write_manifest(out, "eval", cfg.seed, &cfg.effective_toml()?, &artifacts)?;
    Ok(summary)
}

fn mask_stems(root: &Path) -> Result<BTreeSet<String>> {
    let dir = root.join(MASKS_DIR);
    let mut out = BTreeSet::new();
    if dir.is_dir() {
        for entry in fs::read_dir(&dir).map_err(Error::io(&dir))? {
            let path = entry.map_err(Error::io(&dir))?.path();
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Probability map, binary mask and overlay per input image. Images
/// without a mask are overlaid against their own prediction.
pub fn cmd_predict(cfg: &RunConfig) -> Result<String> {
    let net = load_checkpoint(&cfg.checkpoint_dir())?;
    let size = cfg.target_size()?;
    check_size(size, net.config.required_divisor())?;
    let root = dataset_root(cfg)?;
    let labeled = mask_stems(root)?;
    let samples = preprocessed(&load_dir(root, false)?, size);

    let out = &cfg.out;
    for d in ["predictions", "overlays"] {
        fs::create_dir_all(out.join(d)).map_err(Error::io(out.join(d)))?;
    }
    let mut artifacts = Vec::new();
    for s in &samples {
        let prob = predict_sample(&net, s)?;
        let bin = binarize(&prob, cfg.threshold);
        let prob_rel = Path::new("predictions").join(format!("{}_prob.png", s.id));
        let mask_rel = Path::new("predictions").join(format!("{}_mask.png", s.id));
        write_gray(&out.join(&prob_rel), &prob)?;
        write_gray(&out.join(&mask_rel), &bin)?;
        let gt = if labeled.contains(&s.id) { &s.mask } else { &bin };
        let img = overlay_render(&bin, gt, &s.image, OverlayStyle::Extended)?;
        let ov_rel = overlay_name(&s.id);
        write_rgb(&out.join(&ov_rel), &img)?;
        artifacts.extend([prob_rel, mask_rel, ov_rel]);
    }
    write_manifest(out, "predict", cfg.seed, &cfg.effective_toml()?, &artifacts)?;
    Ok(format!("predicted {} images into {}\n", samples.len(), out.display()))
}

/// Parameters, FLOPs and serialized size of the configured model. `size`
/// defaults to 512.
pub fn cmd_complexity(cfg: &RunConfig, per_layer: bool) -> Result<String> {
    let model_cfg = cfg.model_config()?;
    let size = cfg.size.unwrap_or(512);
    let c = complexity(&model_cfg, size, size)?;
    let net = LfraNet::<f32>::new(&model_cfg)?;
    let serialized = checkpoint::serialized_size(&net);
    let mut text = String::new();
    let _ = writeln!(text, "preset = {}", cfg.preset);
    let _ = writeln!(text, "input = {size}x{size}");
    let _ = writeln!(text, "params = {}", c.params);
    let _ = writeln!(text, "statistics = {}", c.statistics);
    let _ = writeln!(text, "flops = {}", c.flops);
    let _ = writeln!(text, "gflops = {:.3}", c.flops as f64 / 1e9);
    let _ = writeln!(text, "payload_f32_bytes = {}", c.payload_bytes(4));
    let _ = writeln!(text, "payload_f32_mb = {:.3}", c.payload_bytes(4) as f64 / 1e6);
    let _ = writeln!(text, "serialized_bytes = {serialized}");
    if per_layer {
        text.push_str("\nlayer,params,flops\n");
        for row in layer_costs(&model_cfg, size, size)? {
            let _ = writeln!(text, "{},{},{}", row.name, row.params, row.flops);
        }
    }
    write_text(&cfg.out.join("complexity.txt"), &text)?;
    write_manifest(
        &cfg.out,
        "complexity",
        cfg.seed,
        &cfg.effective_toml()?,
        &[PathBuf::from("complexity.txt")],
    )?;
    Ok(text)
}

/// Size and cost of every ablation preset; with `train` set, each preset is
/// also trained into `out/ablation/<preset>` and its best val dice recorded.
pub fn cmd_ablate(cfg: &RunConfig, train: bool) -> Result<String> {
    let size = cfg.size.unwrap_or(512);
    let mut text = String::from("preset,params,flops,best_val_dice\n");
    let mut artifacts = vec![PathBuf::from("ablation.csv")];
    for name in ABLATION_PRESETS {
        let run = RunConfig {
            preset: name.to_string(),
            out: cfg.out.join("ablation").join(name),
            ..cfg.clone()
        };
        let model_cfg = run.model_config()?;
        let c = complexity(&model_cfg, size, size)?;
        let dice = if train {
            cmd_train(&run)?;
            let log = fs::read_to_string(run.out.join(TRAIN_LOG)).map_err(Error::io(run.out.join(TRAIN_LOG)))?;
            artifacts.push(Path::new("ablation").join(name).join(TRAIN_LOG));
            best_val_from_log(&log).map(|v| format!("{v:.6}")).unwrap_or_default()
        } else {
            String::new()
        };
        let _ = writeln!(text, "{name},{},{},{dice}", c.params, c.flops);
    }
    write_text(&cfg.out.join("ablation.csv"), &text)?;
    write_manifest(&cfg.out, "ablate", cfg.seed, &cfg.effective_toml()?, &artifacts)?;
    Ok(text)
}

fn best_val_from_log(log: &str) -> Option<f64> {
    log.lines()
        .skip(1)
        .filter_map(|l| l.rsplit(',').next()?.parse::<f64>().ok())
        .fold(None, |a, v| Some(a.map_or(v, |a: f64| a.max(v))))
}

/// Runs the gradient suite and writes `gradcheck.csv`. Fails with
/// [`Error::GradCheckFailed`] if any check exceeds its tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<String> {
    let results = run_suite(cfg.seed)?;
    let mut text = String::from("name,max_error,tolerance,checked,passed\n");
    for r in &results {
        let _ = writeln!(
            text,
            "{},{:.3e},{:.0e},{},{}",
            r.name,
            r.result.max_error,
            r.result.tolerance,
            r.result.checked,
            r.passed()
        );
    }
    write_text(&cfg.out.join("gradcheck.csv"), &text)?;
    write_manifest(
        &cfg.out,
        "gradcheck",
        cfg.seed,
        &cfg.effective_toml()?,
        &[PathBuf::from("gradcheck.csv")],
    )?;
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Error::GradCheckFailed {
            failed,
            total: results.len(),
        });
    }
    Ok(text)
}
