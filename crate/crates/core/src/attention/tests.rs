use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::autodiff::Mode;
use crate::nn::{infer, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

fn build<M, T: Scalar>(f: impl FnOnce(&mut Init<'_, T>) -> Result<M>) -> (ParamStore<T>, M) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(5, rng::STREAM_INIT, 0);
    let m = f(&mut Init::new(&mut store, &mut r)).unwrap();
    (store, m)
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, 0, 0);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Pixel-loop reference of the attention map.
fn raam_reference(m: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = m.nchw().unwrap();
    let (ho, wo) = (h / 8, w / 8);
    let at = |b: usize, ch: usize, y: usize, x: usize| m.data()[((b * c + ch) * h + y) * w + x];
    let mut out = Tensor::zeros([n, 1, ho, wo]);
    for b in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let mut total = 0.0;
                for grp in 0..2 {
                    // channel-wise mean of S over the group, with S = max-cascade * avg-cascade
                    let mut s_mean = 0.0;
                    let mut ca = 0.0;
                    for ch in grp * 16..(grp + 1) * 16 {
                        // max of maxes equals the max over the 8x8 block; the
                        // avg cascade equals the block mean
                        let mut mx = f64::NEG_INFINITY;
                        let mut sum = 0.0;
                        for y in 8 * i..8 * i + 8 {
                            for x in 8 * j..8 * j + 8 {
                                mx = mx.max(at(b, ch, y, x));
                                sum += at(b, ch, y, x);
                            }
                        }
                        s_mean += mx * (sum / 64.0) / 16.0;
                        ca += sum / 64.0 / 16.0;
                    }
                    total += s_mean * ca;
                }
                out.data_mut()[(b * ho + i) * wo + j] = total / 2.0;
            }
        }
    }
    out
}

#[test]
fn raam_map_matches_pixel_loop() {
    let m = random(&[2, 32, 16, 24], 1).map(|v| v.abs());
    let mut tape = Tape::new();
    let v = tape.constant(m.clone());
    let a = raam_attention(&mut tape, v).unwrap();
    let got = tape.value(a);
    let want = raam_reference(&m);
    assert_eq!(got.dims(), want.dims());
    for (x, y) in got.data().iter().zip(want.data()) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn raam_map_is_local_to_its_region() {
    let m = random(&[1, 32, 16, 16], 2);
    let mut bumped = m.clone();
    // one pixel inside region (1, 0)
    bumped.data_mut()[5 * 16 * 16 + 9 * 16 + 3] += 0.5;
    let run = |t: &Tensor<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let a = raam_attention(&mut tape, v).unwrap();
        tape.value(a).clone()
    };
    let (a, b) = (run(&m), run(&bumped));
    for k in 0..4 {
        assert_eq!(a.data()[k] != b.data()[k], k == 2, "region {k}");
    }
}

#[test]
fn raam_ones_gives_unit_map() {
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(Tensor::ones([1, 32, 8, 16]));
    let a = raam_attention(&mut tape, v).unwrap();
    assert!(tape.value(a).data().iter().all(|&x| x == 1.0));
}

/// Zero conv, `gamma = 0`, `beta = 1` forces `m = 1`, so the skip passes
/// through unchanged.
#[test]
fn raam_constant_ones_path_is_identity() {
    let (mut s, r) = build::<_, f32>(|i| RegionAwareAttention::new(i, "raam", 3));
    for id in [r.conv.weight, r.conv.bias.unwrap(), r.bn.gamma] {
        s.value_mut(id).data_mut().fill(0.0);
    }
    s.value_mut(r.bn.beta).data_mut().fill(1.0);
    let x = Tensor::from_fn([2, 3, 16, 8], |i| (i as f32 * 0.731).sin() * 3.0);
    let y = infer(&s, &x, |g, v| r.forward(g, v)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn raam_rejects_bad_inputs() {
    let (s, r) = build::<_, f64>(|i| RegionAwareAttention::new(i, "raam", 4));
    let e = infer(&s, &Tensor::zeros([1, 4, 12, 16]), |g, v| r.forward(g, v)).unwrap_err();
    assert!(matches!(e, Error::Indivisible { divisor: 8, .. }));
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::zeros([1, 16, 8, 8]));
    assert!(matches!(
        raam_attention(&mut tape, v),
        Err(Error::ChannelMismatch { expected: 32, .. })
    ));
}

#[test]
fn raam_parameter_count() {
    for c in [1, 8, 16] {
        let (s, _) = build::<_, f32>(|i| RegionAwareAttention::new(i, "r", c));
        assert_eq!(s.trainable_count(), 9 * c * 32 + 32 + 64);
    }
}

#[test]
fn fmam_zero_gates_and_bias_give_zero() {
    let (mut s, f) = build::<_, f32>(|i| FocalModulation::new(i, "f", 6, &[3, 5], 0.3));
    for id in [f.gates.weight, f.gates.bias.unwrap(), f.modulator.bias.unwrap()] {
        s.value_mut(id).data_mut().fill(0.0);
    }
    let x = Tensor::from_fn([2, 6, 5, 7], |i| (i as f32 * 1.3).cos() * 2.0);
    let y = infer(&s, &x, |g, v| f.forward(g, v)).unwrap();
    assert_eq!(y.dims(), x.dims());
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn fmam_parameter_count() {
    for (c, kernels) in [(32usize, vec![3usize, 5]), (4, vec![3]), (8, vec![3, 5, 7])] {
        let (s, f) = build::<_, f32>(|i| FocalModulation::new(i, "f", c, &kernels, 0.3));
        let l = kernels.len();
        let dw: usize = kernels.iter().map(|k| k * k * c + c).sum();
        assert_eq!(s.trainable_count(), 3 * (c * c + c) + dw + c * (l + 1) + l + 1);
        assert_eq!(f.gate_count(), l + 1);
        assert_eq!(f.kernels(), kernels);
    }
}

#[test]
fn fmam_requires_a_level_and_matching_channels() {
    let mut store = ParamStore::<f32>::new();
    let mut r = rng::stream(0, 0, 0);
    assert!(FocalModulation::new(&mut Init::new(&mut store, &mut r), "f", 4, &[], 0.3).is_err());
    let (s, f) = build::<_, f32>(|i| FocalModulation::new(i, "f", 4, &[3], 0.3));
    let e = infer(&s, &Tensor::zeros([1, 3, 4, 4]), |g, v| f.forward(g, v)).unwrap_err();
    assert!(matches!(
        e,
        Error::ChannelMismatch {
            expected: 4,
            found: 3,
            ..
        }
    ));
}

/// With a single 1x1 level and identity-like weights the modulation can be
/// written out by hand.
#[test]
fn fmam_hand_computed_single_pixel() {
    let (mut s, f) = build::<_, f64>(|i| FocalModulation::new(i, "f", 1, &[1], 0.0));
    let names: Vec<(&str, f64)> = vec![
        ("f.value.weight", 2.0),
        ("f.value.bias", 0.0),
        ("f.level1.weight", 1.0),
        ("f.level1.bias", -1.0),
        ("f.query.weight", 3.0),
        ("f.query.bias", 0.0),
        ("f.modulator.weight", 1.0),
        ("f.modulator.bias", 0.5),
    ];
    for (n, v) in names {
        s.value_mut(s.find(n).unwrap()).data_mut().fill(v);
    }
    let gw = s.find("f.gates.weight").unwrap();
    s.value_mut(gw).data_mut().copy_from_slice(&[1.0, 2.0]);
    s.value_mut(s.find("f.gates.bias").unwrap()).data_mut().fill(0.0);
    // x = 3: z0 = 6, z1 = relu(6 - 1) = 5, global = 5, gates (3, 6)
    // Z = 5 * 3 + 5 * 6 = 45, h = 45.5, q = 9
    let y = infer(&s, &Tensor::full([1, 1, 1, 1], 3.0), |g, v| f.forward(g, v)).unwrap();
    assert_eq!(y.data(), &[9.0 * 45.5]);
}

#[test]
fn attention_train_mode_runs() {
    let (s, r) = build::<_, f64>(|i| RegionAwareAttention::new(i, "r", 2));
    let mut tape = Tape::new();
    let x = tape.constant(random(&[2, 2, 8, 8], 3));
    let mut g = Graph::new(&mut tape, &s, Mode::Train, rng::stream(0, 0, 0));
    let y = r.forward(&mut g, x).unwrap();
    assert_eq!(g.take_stat_updates().len(), 1);
    assert_eq!(g.tape.shape(y).dims(), &[2, 2, 8, 8]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fmam_preserves_shape(c in 1usize..6, n in 1usize..3, h in 1usize..8, w in 1usize..8, levels in 1usize..4) {
        let kernels: Vec<usize> = (0..levels).map(|l| 2 * l + 3).collect();
        let (s, f) = build::<_, f64>(|i| FocalModulation::new(i, "f", c, &kernels, 0.3));
        let y = infer(&s, &random(&[n, c, h, w], 4), |g, v| f.forward(g, v)).unwrap();
        prop_assert_eq!(y.dims(), &[n, c, h, w]);
    }

    #[test]
    fn raam_preserves_shape(c in 1usize..5, n in 1usize..3, hb in 1usize..4, wb in 1usize..4) {
        let (s, r) = build::<_, f64>(|i| RegionAwareAttention::new(i, "r", c));
        let y = infer(&s, &random(&[n, c, 8 * hb, 8 * wb], 5), |g, v| r.forward(g, v)).unwrap();
        prop_assert_eq!(y.dims(), &[n, c, 8 * hb, 8 * wb]);
    }
}
