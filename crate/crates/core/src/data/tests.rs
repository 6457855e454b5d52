use alloc::format;

use proptest::prelude::*;

use super::*;

fn synthetic(n: usize, size: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| synthetic_vessel_sample(format!("img{i:02}"), size, i as u64))
        .collect()
}

#[test]
fn known_dataset_specs() {
    let d = DatasetSpec::by_name("DRIVE").unwrap();
    assert_eq!((d.train_count, d.test_count, d.augmented), (20, 20, Some(1080)));
    assert_eq!(DatasetSpec::by_name("stare").unwrap().augmented, Some(1024));
    assert_eq!(DatasetSpec::by_name("chase").unwrap().test_count, 8);
    assert!(DatasetSpec::by_name("custom").unwrap().augmented.is_none());
    assert!(DatasetSpec::by_name("hrf").is_err());
}

#[test]
fn sample_validation() {
    let s = synthetic_vessel_sample("a", 16, 0);
    assert!(s.validate().is_ok());
    let mut bad = s.clone();
    bad.mask.data_mut()[0] = 0.5;
    assert!(bad.validate().is_err());
    let mut bad = s.clone();
    bad.image = Tensor::zeros([1, 16, 16]);
    assert!(bad.validate().is_err());
    let mut bad = s;
    bad.fov = Some(Tensor::zeros([1, 8, 8]));
    assert!(bad.validate().is_err());
}

#[test]
fn synthetic_sample_is_deterministic_and_plausible() {
    let a = synthetic_vessel_sample("a", 64, 3);
    assert_eq!(a, synthetic_vessel_sample("a", 64, 3));
    assert_ne!(a.mask, synthetic_vessel_sample("a", 64, 4).mask);
    let frac = a.mask.sum() / a.mask.numel() as f32;
    assert!((0.03..0.35).contains(&frac), "{frac}");
    // vessels sit only inside the FOV
    let fov = a.fov.as_ref().unwrap();
    assert!(a.mask.data().iter().zip(fov.data()).all(|(m, f)| *m <= *f));
}

#[test]
fn resize_same_size_is_identity() {
    let s = synthetic_vessel_sample("a", 20, 1);
    assert_eq!(resize_bilinear(&s.image, 20, 20), s.image);
    assert_eq!(resize_nearest(&s.mask, 20, 20), s.mask);
}

#[test]
fn resize_bilinear_of_constant_is_constant() {
    let t = Tensor::full([2, 5, 7], 0.25f32);
    let r = resize_bilinear(&t, 11, 3);
    assert_eq!(r.dims(), &[2, 11, 3]);
    assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
}

#[test]
fn nearest_upscale_repeats_pixels() {
    let t = Tensor::new([1, 2, 2], alloc::vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
    let r = resize_nearest(&t, 4, 4);
    assert_eq!(
        r.data(),
        &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
    );
}

#[test]
fn preprocess_keeps_masks_binary() {
    let s = synthetic_vessel_sample("a", 30, 2);
    let p = preprocess(&s, 16);
    assert_eq!(p.extents(), (16, 16));
    assert!(p.validate().is_ok());
}

#[test]
fn rotation_by_zero_is_identity() {
    let s = synthetic_vessel_sample("a", 24, 5);
    assert_eq!(rotate(&s, 0.0).mask, s.mask);
}

#[test]
fn rotation_by_quarter_turn_matches_index_map() {
    let t = Tensor::from_fn([1, 5, 5], |i| i as f32);
    let r = rotate_tensor(&t, 90.0, false);
    for y in 0..5 {
        for x in 0..5 {
            // counterclockwise: the source of (y, x) is (x, 4 - y)
            assert_eq!(r.data()[y * 5 + x], t.data()[x * 5 + (4 - y)], "({y}, {x})");
        }
    }
}

#[test]
fn contrast_scales_about_channel_mean() {
    let s = synthetic_vessel_sample("a", 16, 6);
    assert_eq!(adjust_contrast(&s, 1.0).image.data().len(), s.image.numel());
    let c = adjust_contrast(&s, 1.0);
    for (a, b) in c.image.data().iter().zip(s.image.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    let lo = adjust_contrast(&s, 0.8);
    assert_eq!(lo.mask, s.mask);
    let spread = |t: &Tensor<f32>| {
        let d = &t.data()[..256];
        d.iter().cloned().fold(f32::MIN, f32::max) - d.iter().cloned().fold(f32::MAX, f32::min)
    };
    assert!(spread(&lo.image) < spread(&s.image));
}

#[test]
fn augmentation_reaches_target_deterministically() {
    let samples = synthetic(20, 16);
    let a = augment(&samples, 1080, 7).unwrap();
    assert_eq!(a.len(), 1080);
    assert_eq!(&a[..20], &samples[..]);
    assert_eq!(a[20].id, "img00_aug0000");
    assert_eq!(a[1079].id, format!("img{:02}_aug1059", 1059 % 20));
    assert!(a.iter().all(|s| s.validate().is_ok()));
    let ids: alloc::collections::BTreeSet<_> = a.iter().map(|s| s.id.clone()).collect();
    assert_eq!(ids.len(), 1080);
    assert_eq!(a, augment(&samples, 1080, 7).unwrap());
    assert_ne!(a, augment(&samples, 1080, 8).unwrap());
}

#[test]
fn augmentation_kinds_cycle() {
    assert!(matches!(augmentation_for(0, 20, 1), (0, Augmentation::Rotate { .. })));
    assert!(matches!(
        augmentation_for(21, 20, 1),
        (1, Augmentation::Contrast { .. })
    ));
    assert!(matches!(augmentation_for(45, 20, 1), (5, Augmentation::Both { .. })));
    assert!(matches!(augmentation_for(60, 20, 1), (0, Augmentation::Rotate { .. })));
}

#[test]
fn augmentation_target_below_input_is_an_error() {
    assert!(augment(&synthetic(3, 8), 2, 0).is_err());
    assert_eq!(augment(&synthetic(3, 8), 3, 0).unwrap().len(), 3);
    assert!(augment(&[], 0, 0).unwrap().is_empty());
}

#[test]
fn split_is_seeded_and_disjoint() {
    let s = synthetic(10, 8);
    let (tr, va) = split_train_val(&s, TRAIN_FRACTION, 1).unwrap();
    assert_eq!((tr.len(), va.len()), (8, 2));
    assert_eq!(split_train_val(&s, TRAIN_FRACTION, 1).unwrap().0, tr);
    let mut ids: Vec<_> = tr.iter().chain(&va).map(|x| x.id.clone()).collect();
    ids.sort();
    assert_eq!(ids, s.iter().map(|x| x.id.clone()).collect::<Vec<_>>());
    assert!(split_train_val(&s[..1], 0.8, 0).is_err());
    assert!(split_train_val(&s, 1.0, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn augment_count_is_exact(n in 1usize..6, extra in 0usize..12, seed: u64) {
        let s = synthetic(n, 8);
        prop_assert_eq!(augment(&s, n + extra, seed).unwrap().len(), n + extra);
    }

    #[test]
    fn rotation_keeps_masks_binary(deg in -45.0f64..45.0) {
        let s = synthetic_vessel_sample("a", 16, 9);
        prop_assert!(rotate(&s, deg).validate().is_ok());
    }

    #[test]
    fn split_sizes(n in 2usize..40, frac in 0.05f64..0.95) {
        let s = synthetic(n, 4);
        let (tr, va) = split_train_val(&s, frac, 0).unwrap();
        prop_assert_eq!(tr.len() + va.len(), n);
        prop_assert!(!tr.is_empty() && !va.is_empty());
    }
}
