use std::fs;

use image::{GrayImage, Luma, Rgba, RgbaImage};
use lfra::dataset::{load_dir, read_image, read_mask, write_dir, write_gray};
use lfra::Error;
use lfra_core::data::synthetic_vessel_sample;
use lfra_core::Tensor;

#[test]
fn write_then_load_round_trips_masks_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<_> = (0..3)
        .map(|i| synthetic_vessel_sample(format!("s{i}"), 24, i))
        .collect();
    write_dir(dir.path(), &samples).unwrap();
    let back = load_dir(dir.path(), true).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.fov, b.fov);
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn samples_are_ordered_by_stem() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<_> = ["b", "a", "c"]
        .iter()
        .map(|n| synthetic_vessel_sample(*n, 16, 0))
        .collect();
    write_dir(dir.path(), &samples).unwrap();
    let ids: Vec<_> = load_dir(dir.path(), true).unwrap().into_iter().map(|s| s.id).collect();
    assert_eq!(ids, ["a", "b", "c"]);
}

#[test]
fn gray_and_rgba_images_become_three_channels() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.png");
    GrayImage::from_fn(4, 3, |x, _| Luma([(x * 60) as u8]))
        .save(&g)
        .unwrap();
    let t = read_image(&g).unwrap();
    assert_eq!(t.dims(), &[3, 3, 4]);
    assert_eq!(t.data()[1], 60.0 / 255.0);
    assert_eq!(t.data()[12 + 1], 60.0 / 255.0);
    let a = dir.path().join("a.png");
    RgbaImage::from_pixel(2, 2, Rgba([255, 0, 51, 7])).save(&a).unwrap();
    let t = read_image(&a).unwrap();
    assert_eq!(t.data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.2, 0.2, 0.2, 0.2]);
}

#[test]
fn masks_threshold_at_128() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.png");
    GrayImage::from_fn(4, 1, |x, _| Luma([[0, 127, 128, 255][x as usize]]))
        .save(&p)
        .unwrap();
    assert_eq!(read_mask(&p).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn gray_writer_clamps_and_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.png");
    write_gray(&p, &Tensor::new([1, 1, 3], vec![-1.0, 0.5, 2.0]).unwrap()).unwrap();
    let img = image::open(&p).unwrap().to_luma8();
    assert_eq!(img.as_raw(), &[0, 128, 255]);
}

#[test]
fn missing_pieces_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_dir(&dir.path().join("nope"), true),
        Err(Error::Dataset { .. })
    ));
    assert!(matches!(load_dir(dir.path(), true), Err(Error::Dataset { .. })));

    write_dir(
        dir.path(),
        &[synthetic_vessel_sample("a", 16, 0), synthetic_vessel_sample("b", 16, 1)],
    )
    .unwrap();
    fs::remove_file(dir.path().join("masks/b.png")).unwrap();
    let err = load_dir(dir.path(), true).unwrap_err();
    assert!(err.to_string().contains("no matching mask"), "{err}");
    let loose = load_dir(dir.path(), false).unwrap();
    assert!(loose[1].mask.data().iter().all(|&v| v == 0.0));

    fs::write(dir.path().join("images/c.png"), b"not a png").unwrap();
    assert!(matches!(load_dir(dir.path(), false), Err(Error::Image { .. })));
}

#[test]
fn mismatched_mask_size_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dir(dir.path(), &[synthetic_vessel_sample("a", 16, 0)]).unwrap();
    write_gray(&dir.path().join("masks/a.png"), &Tensor::zeros([1, 8, 8])).unwrap();
    assert!(matches!(load_dir(dir.path(), true), Err(Error::Dataset { .. })));
}
