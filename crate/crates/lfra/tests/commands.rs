mod common;

use std::fs;

use common::{tiny_run, write_fixture, write_full_mask_fixture, FIXTURE_SIZE};
use lfra::checkpoint::{load_checkpoint, save_checkpoint};
use lfra::commands::{cmd_ablate, cmd_complexity, cmd_eval, cmd_predict, cmd_train};
use lfra::{Error, RunConfig};
use lfra_core::model::{LfraNet, ModelConfig, ABLATION_PRESETS};

#[test]
fn train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_fixture(&root, 3);
    let cfg = tiny_run(&root, dir.path().join("run"));
    cmd_train(&cfg).unwrap();
    let out = &cfg.out;
    for f in [
        "ckpt/manifest.txt",
        "ckpt/weights.bin",
        "logs/train.csv",
        "config.toml",
        "manifest.txt",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(out.join("logs/train.csv")).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_dice");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command = train\nseed = 7\n"));
    assert_eq!(manifest.matches("\nartifact ").count(), 4);

    let eval = RunConfig {
        out: dir.path().join("eval"),
        checkpoint: Some(out.join("ckpt")),
        ..cfg.clone()
    };
    let summary = cmd_eval(&eval).unwrap();
    assert!(summary.contains("images = 3"));
    let csv = fs::read_to_string(eval.out.join("metrics.csv")).unwrap();
    let rows: Vec<_> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 3 + 2);
    assert!(rows[4].starts_with("mean,") && rows[5].starts_with("pooled,"));
    assert_eq!(fs::read_dir(eval.out.join("overlays")).unwrap().count(), 3);

    fs::remove_dir_all(root.join("masks")).unwrap();
    let pred = RunConfig {
        out: dir.path().join("pred"),
        ..eval
    };
    cmd_predict(&pred).unwrap();
    for id in ["img00", "img01", "img02"] {
        for f in [
            format!("predictions/{id}_prob.png"),
            format!("predictions/{id}_mask.png"),
            format!("overlays/{id}.png"),
        ] {
            let img = image::open(pred.out.join(&f)).unwrap();
            assert_eq!(
                (img.width(), img.height()),
                (FIXTURE_SIZE as u32, FIXTURE_SIZE as u32),
                "{f}"
            );
        }
    }
}

#[test]
fn missing_root_leaves_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(&dir.path().join("absent"), dir.path().join("run"));
    assert!(matches!(cmd_train(&cfg), Err(Error::Dataset { .. })));
    assert!(!cfg.out.exists());
    let none = RunConfig {
        dataset_root: None,
        ..cfg
    };
    assert!(matches!(cmd_train(&none), Err(Error::Config(_))));
    assert!(!none.out.exists());
}

#[test]
fn indivisible_size_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_fixture(&root, 2);
    let cfg = RunConfig {
        size: Some(24),
        ..tiny_run(&root, dir.path().join("run"))
    };
    assert!(matches!(cmd_train(&cfg), Err(Error::Config(_))));
    assert!(!cfg.out.exists());
}

#[test]
fn perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_full_mask_fixture(&root, 2);
    // zero head weights and a large bias: every pixel is foreground
    let mut net = LfraNet::<f32>::new(&ModelConfig::preset("tiny").unwrap()).unwrap();
    let w = net.params.find("head.weight").unwrap();
    net.params.value_mut(w).data_mut().fill(0.0);
    let b = net.params.find("head.bias").unwrap();
    net.params.value_mut(b).data_mut().fill(20.0);
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&net, &ckpt).unwrap();
    let cfg = RunConfig {
        checkpoint: Some(ckpt),
        ..tiny_run(&root, dir.path().join("eval"))
    };
    let summary = cmd_eval(&cfg).unwrap();
    assert!(summary.contains("mean.dice = 1.000000"), "{summary}");
    assert!(summary.contains("pooled.dice = 1.000000"));
    // no negatives, so specificity is 0/0
    assert!(summary.contains("degenerate_images = 2"));
}

#[test]
fn eval_rejects_a_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_fixture(&root, 1);
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(
        &LfraNet::<f32>::new(&ModelConfig::preset("tiny").unwrap()).unwrap(),
        &ckpt,
    )
    .unwrap();
    let blob = ckpt.join("weights.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 1]).unwrap();
    let cfg = RunConfig {
        checkpoint: Some(ckpt.clone()),
        ..tiny_run(&root, dir.path().join("eval"))
    };
    assert!(matches!(cmd_eval(&cfg), Err(Error::CorruptCheckpoint { .. })));
    assert!(load_checkpoint(&ckpt).is_err());
}

#[test]
fn complexity_report_and_manifest_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out: dir.path().join("c"),
        ..RunConfig::default()
    };
    let text = cmd_complexity(&cfg, true).unwrap();
    assert!(text.contains("params = ") && text.contains("flops = ") && text.contains("serialized_bytes = "));
    assert!(text.contains("\nhead,"));
    let first = fs::read(cfg.out.join("manifest.txt")).unwrap();
    cmd_complexity(&cfg, true).unwrap();
    assert_eq!(fs::read(cfg.out.join("manifest.txt")).unwrap(), first);
}

#[test]
fn ablate_lists_every_preset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out: dir.path().join("a"),
        size: Some(64),
        ..RunConfig::default()
    };
    let text = cmd_ablate(&cfg, false).unwrap();
    assert_eq!(text.lines().count(), 1 + ABLATION_PRESETS.len());
    for p in ABLATION_PRESETS {
        assert!(text.contains(&format!("\n{p},")), "{p}");
    }
}

#[test]
fn ablate_can_train_each_preset() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_fixture(&root, 2);
    let cfg = RunConfig {
        epochs: 1,
        augment: None,
        size: Some(FIXTURE_SIZE),
        model: toml::toml! { channels = [2, 4, 8] },
        ..tiny_run(&root, dir.path().join("abl"))
    };
    let text = cmd_ablate(&cfg, true).unwrap();
    for line in text.lines().skip(1) {
        let dice: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&dice), "{line}");
    }
    assert!(cfg.out.join("ablation/MLU/ckpt/weights.bin").is_file());
}
