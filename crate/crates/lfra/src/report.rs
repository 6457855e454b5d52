//! Text artifacts: metrics CSV, summaries, training logs and run manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lfra_core::metrics::{ConfusionCounts, Metrics, MetricsReport};
use lfra_core::training::EpochLog;

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};

pub const MANIFEST_TAG: &str = "lfra-run-v1";
pub const METRICS_HEADER: &str = "id,dice,jaccard,accuracy,sensitivity,specificity,tp,fp,fn,tn,degenerate";

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    fs::write(path, text).map_err(Error::io(path))
}

fn metrics_row(out: &mut String, id: &str, m: &Metrics, c: Option<&ConfusionCounts>) {
    let _ = write!(
        out,
        "{id},{:.6},{:.6},{:.6},{:.6},{:.6}",
        m.dice, m.jaccard, m.accuracy, m.sensitivity, m.specificity
    );
    match c {
        Some(c) => {
            let _ = write!(out, ",{},{},{},{}", c.tp, c.fp, c.fn_, c.tn);
        }
        None => out.push_str(",,,,"),
    }
    let _ = writeln!(out, ",{}", m.degenerate);
}

/// One row per image, then `mean` (unweighted over images) and `pooled`
/// (metrics of the summed counts).
pub fn metrics_csv(r: &MetricsReport) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for img in &r.per_image {
        metrics_row(&mut out, &img.id, &img.metrics, Some(&img.counts));
    }
    metrics_row(&mut out, "mean", &r.mean, None);
    metrics_row(&mut out, "pooled", &r.pooled, Some(&r.pooled_counts));
    out
}

/// `key = value` lines describing an evaluation.
pub fn summary_text(r: &MetricsReport, threshold: f64, fov_only: bool) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "images = {}", r.per_image.len());
    let _ = writeln!(out, "threshold = {threshold}");
    let _ = writeln!(out, "fov_only = {fov_only}");
    for (label, m) in [("mean", &r.mean), ("pooled", &r.pooled)] {
        for (name, v) in [
            ("dice", m.dice),
            ("jaccard", m.jaccard),
            ("accuracy", m.accuracy),
            ("sensitivity", m.sensitivity),
            ("specificity", m.specificity),
        ] {
            let _ = writeln!(out, "{label}.{name} = {v:.6}");
        }
    }
    let degenerate = r.per_image.iter().filter(|m| m.metrics.degenerate).count();
    let _ = writeln!(out, "degenerate_images = {degenerate}");
    out
}

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_dice\n");
    for e in log {
        let val = e.val_dice.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(out, "{},{:.6},{val}", e.epoch, e.train_loss);
    }
    out
}

/// Run manifest: command, seed, config checksum and one checksum line per
/// artifact (paths relative to `out`, sorted). Writes `out/manifest.txt`.
pub fn write_manifest(out: &Path, command: &str, seed: u64, config_text: &str, artifacts: &[PathBuf]) -> Result<()> {
    let mut rel: Vec<&PathBuf> = artifacts.iter().collect();
    rel.sort();
    rel.dedup();
    let mut text = String::new();
    let _ = writeln!(text, "{MANIFEST_TAG}");
    let _ = writeln!(text, "command = {command}");
    let _ = writeln!(text, "seed = {seed}");
    let _ = writeln!(text, "config_sha256 = {}", sha256_hex(config_text.as_bytes()));
    for p in rel {
        let full = out.join(p);
        let bytes = fs::read(&full).map_err(Error::io(&full))?;
        let name = p.to_string_lossy().replace('\\', "/");
        let _ = writeln!(text, "artifact {name} {}", sha256_hex(&bytes));
    }
    write_text(&out.join("manifest.txt"), &text)
}
