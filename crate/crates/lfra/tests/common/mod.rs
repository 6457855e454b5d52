#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lfra::dataset::write_dir;
use lfra::RunConfig;
use lfra_core::data::synthetic_vessel_sample;
use lfra_core::Tensor;

pub const FIXTURE_SIZE: usize = 32;

/// `n` synthetic labeled samples written as a dataset root.
pub fn write_fixture(root: &Path, n: usize) {
    let samples: Vec<_> = (0..n)
        .map(|i| synthetic_vessel_sample(format!("img{i:02}"), FIXTURE_SIZE, i as u64))
        .collect();
    write_dir(root, &samples).unwrap();
}

/// A small, fast training run on the fixture at `root`.
pub fn tiny_run(root: &Path, out: PathBuf) -> RunConfig {
    RunConfig {
        dataset_root: Some(root.to_path_buf()),
        preset: "tiny".into(),
        out,
        seed: 7,
        epochs: 2,
        batch_size: 2,
        size: Some(FIXTURE_SIZE),
        augment: Some(6),
        ..RunConfig::default()
    }
}

/// Fixture whose masks are all foreground.
pub fn write_full_mask_fixture(root: &Path, n: usize) {
    let samples: Vec<_> = (0..n)
        .map(|i| {
            let mut s = synthetic_vessel_sample(format!("img{i:02}"), FIXTURE_SIZE, i as u64);
            s.mask = Tensor::from_fn([1, FIXTURE_SIZE, FIXTURE_SIZE], |_| 1.0);
            s
        })
        .collect();
    write_dir(root, &samples).unwrap();
}
