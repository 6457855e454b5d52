//! Finite-difference gradient checks for every tape op, the network blocks,
//! both attention modules, the dice loss and a whole tiny model.
//!
//! All checks run in `f64` with central differences. Modules are checked
//! against both their input and every trainable parameter, in train mode
//! (batch statistics) with a fixed dropout mask.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{FocalModulation, RegionAwareAttention};
use crate::autodiff::{
    finite_diff_check, Conv2dOptions, ConvTransposeOptions, GradCheck, Mode, NormStats, PoolKind, Tape, Var,
};
use crate::error::Result;
use crate::model::{LfraNet, ModelConfig};
use crate::nn::{BlockOptions, DownsampleBlock, Graph, Init, MsConvBlock, ParamKind, ParamStore, UpsampleBlock};
use crate::rng::{self, StreamRng};
use crate::tensor::{Shape, Tensor};

/// Central-difference step.
pub const FD_EPS: f64 = 1e-6;
/// Tolerance for single ops, blocks, attention modules and the loss.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end model.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Spatial extent of the end-to-end check.
pub const MODEL_SIZE: usize = 16;

/// One named gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub result: GradCheck,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.result.passed()
    }
}

fn uniform(shape: &[usize], rng: &mut StreamRng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `sum(y * w)` with fixed pseudo-random weights `w`, so every output
/// element contributes a distinct sensitivity.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).clone();
    let mut rng = rng::stream(0x5eed, 0, 0);
    let w = tape.constant(uniform(shape.dims(), &mut rng, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Checks `f` against its input and every trainable tensor in `params`.
/// `f` runs under a [`Graph`] in `mode` whose dropout stream is rebuilt from
/// `dropout_seed` on every evaluation, so the mask is the same throughout.
pub fn module_gradcheck<F>(
    params: &ParamStore<f64>,
    input: &Tensor<f64>,
    mode: Mode,
    dropout_seed: u64,
    tolerance: f64,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let ids: Vec<_> = params
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(id, _)| id)
        .collect();
    let mut inputs = Vec::with_capacity(ids.len() + 1);
    inputs.push(input.clone());
    inputs.extend(ids.iter().map(|&id| params.value(id).clone()));
    finite_diff_check(
        |tape, vars| {
            let rng = rng::stream(dropout_seed, rng::STREAM_DROPOUT, 0);
            let mut g = Graph::new(tape, params, mode, rng);
            for (&id, &v) in ids.iter().zip(&vars[1..]) {
                g.bind(id, v)?;
            }
            f(&mut g, vars[0])
        },
        &inputs,
        FD_EPS,
        tolerance,
    )
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn op_cases(rng: &mut StreamRng) -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let mut t = |shape: &[usize]| uniform(shape, rng, -1.0, 1.0);
    let x = t(&[2, 3, 6, 6]);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = Vec::new();
    cases.push((
        "conv2d",
        alloc::vec![x.clone(), t(&[4, 3, 3, 3]), t(&[4])],
        Box::new(|tp, v| {
            let y = tp.conv2d(v[0], v[1], Some(v[2]), Conv2dOptions::default().padding(1))?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "conv2d_strided_dilated",
        alloc::vec![x.clone(), t(&[2, 3, 3, 3])],
        Box::new(|tp, v| {
            let o = Conv2dOptions::default().stride(2).dilation(2).padding(2);
            let y = tp.conv2d(v[0], v[1], None, o)?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "conv2d_grouped",
        alloc::vec![t(&[1, 4, 5, 5]), t(&[6, 2, 3, 3])],
        Box::new(|tp, v| {
            let y = tp.conv2d(v[0], v[1], None, Conv2dOptions::default().groups(2))?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "depthwise_conv2d",
        alloc::vec![x.clone(), t(&[3, 1, 5, 5]), t(&[3])],
        Box::new(|tp, v| {
            let y = tp.depthwise_conv2d(v[0], v[1], Some(v[2]))?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "conv_transpose2d",
        alloc::vec![t(&[2, 3, 4, 4]), t(&[3, 2, 3, 3]), t(&[2])],
        Box::new(|tp, v| {
            let o = ConvTransposeOptions::default().stride(2).padding(1).output_padding(1);
            let y = tp.conv_transpose2d(v[0], v[1], Some(v[2]), o)?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "max_pool2d",
        alloc::vec![x.clone()],
        Box::new(|tp, v| {
            let y = tp.pool2d(v[0], PoolKind::Max, 2, 2)?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "avg_pool2d",
        alloc::vec![x.clone()],
        Box::new(|tp, v| {
            let y = tp.pool2d(v[0], PoolKind::Avg, 3, 3)?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "global_avg_pool",
        alloc::vec![x.clone()],
        Box::new(|tp, v| {
            let y = tp.global_avg_pool(v[0])?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "batch_norm_batch",
        alloc::vec![x.clone(), t(&[3]), t(&[3])],
        Box::new(|tp, v| {
            let (y, _) = tp.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5)?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "batch_norm_running",
        alloc::vec![x.clone(), t(&[3]), t(&[3])],
        Box::new(|tp, v| {
            let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
            let stats = NormStats::Running { mean: &mean, var: &var };
            let (y, _) = tp.batch_norm(v[0], v[1], v[2], stats, 1e-5)?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "leaky_relu",
        alloc::vec![x.clone()],
        Box::new(|tp, v| {
            let y = tp.leaky_relu(v[0], 0.3);
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "relu",
        alloc::vec![x.clone()],
        Box::new(|tp, v| {
            let y = tp.relu(v[0]);
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "sigmoid",
        alloc::vec![x.clone()],
        Box::new(|tp, v| {
            let y = tp.sigmoid(v[0]);
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "dropout",
        alloc::vec![x.clone()],
        Box::new(|tp, v| {
            let mut r = rng::stream(9, rng::STREAM_DROPOUT, 0);
            let y = tp.dropout(v[0], 0.5, Mode::Train, &mut r)?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "concat_channels",
        alloc::vec![x.clone(), t(&[2, 2, 6, 6])],
        Box::new(|tp, v| {
            let y = tp.concat_channels(&[v[0], v[1]])?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "mul_broadcast",
        alloc::vec![x.clone(), t(&[2, 1, 6, 6])],
        Box::new(|tp, v| {
            let y = tp.mul(v[0], v[1])?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "add_broadcast",
        alloc::vec![x.clone(), t(&[2, 3, 1, 1])],
        Box::new(|tp, v| {
            let y = tp.add(v[0], v[1])?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "expand",
        alloc::vec![t(&[2, 3, 1, 1])],
        Box::new(|tp, v| {
            let y = tp.expand(v[0], &Shape::new(&[2, 3, 4, 4]))?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "channel_slice",
        alloc::vec![x.clone()],
        Box::new(|tp, v| {
            let y = tp.channel_slice(v[0], 1, 2)?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "group_channel_mean",
        alloc::vec![t(&[2, 6, 3, 3])],
        Box::new(|tp, v| {
            let y = tp.group_channel_mean(v[0], 2)?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "upsample_nearest",
        alloc::vec![t(&[1, 2, 3, 3])],
        Box::new(|tp, v| {
            let y = tp.upsample_nearest(v[0], 3)?;
            weighted_sum(tp, y)
        }),
    ));
    cases.push((
        "sum_scale",
        alloc::vec![x.clone()],
        Box::new(|tp, v| {
            let y = tp.scale(v[0], -1.7);
            weighted_sum(tp, y)
        }),
    ));
    cases
}

/// Gradient checks of every differentiable tape op.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng::stream(seed, 0, 0);
    op_cases(&mut rng)
        .into_iter()
        .map(|(name, inputs, f)| {
            Ok(CheckResult {
                name: name.to_string(),
                result: finite_diff_check(|tp, v| f(tp, v), &inputs, FD_EPS, OP_TOLERANCE)?,
            })
        })
        .collect()
}

/// Dice loss against a binary mask, with the prediction squashed into
/// `(0, 1)` and both a plain and a foreground-weighted variant.
pub fn dice_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng::stream(seed, 0, 1);
    let logits = uniform(&[2, 1, 5, 5], &mut rng, -2.0, 2.0);
    let mask = Tensor::from_fn([2, 1, 5, 5], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
    [("dice_loss", 1.0), ("dice_loss_weighted", 3.0)]
        .into_iter()
        .map(|(name, weight)| {
            let result = finite_diff_check(
                |tp, v| {
                    let p = tp.sigmoid(v[0]);
                    tp.dice_loss(p, &mask, 1.0, weight)
                },
                core::slice::from_ref(&logits),
                FD_EPS,
                OP_TOLERANCE,
            )?;
            Ok(CheckResult {
                name: name.to_string(),
                result,
            })
        })
        .collect()
}

fn build<M>(seed: u64, f: impl FnOnce(&mut Init<'_, f64>) -> Result<M>) -> Result<(ParamStore<f64>, M)> {
    let mut store = ParamStore::new();
    let mut rng = rng::stream(seed, rng::STREAM_INIT, 0);
    let m = f(&mut Init::new(&mut store, &mut rng))?;
    Ok((store, m))
}

/// The multiscale, downsampling and upsampling blocks plus both attention
/// modules, checked w.r.t. input and parameters in train mode.
pub fn module_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng::stream(seed, 0, 2);
    let mut out = Vec::new();
    let mut push = |name: &str, r: GradCheck| {
        out.push(CheckResult {
            name: name.to_string(),
            result: r,
        })
    };

    let x = uniform(&[2, 3, 6, 6], &mut rng, -1.0, 1.0);
    let (p, b) = build(seed, |i| MsConvBlock::new(i, "ms", 3, 4, BlockOptions::default()))?;
    push(
        "ms_conv_block",
        module_gradcheck(&p, &x, Mode::Train, seed, OP_TOLERANCE, |g, v| {
            let y = b.forward(g, v)?;
            weighted_sum(g.tape, y)
        })?,
    );
    let single = BlockOptions {
        multiscale: false,
        ..BlockOptions::default()
    };
    let (p, b) = build(seed, |i| MsConvBlock::new(i, "plain", 3, 4, single))?;
    push(
        "plain_conv_block",
        module_gradcheck(&p, &x, Mode::Train, seed, OP_TOLERANCE, |g, v| {
            let y = b.forward(g, v)?;
            weighted_sum(g.tape, y)
        })?,
    );
    let (p, b) = build(seed, |i| DownsampleBlock::new(i, "down", 3, 4, 0.3))?;
    push(
        "downsample_block",
        module_gradcheck(&p, &x, Mode::Train, seed, OP_TOLERANCE, |g, v| {
            let y = b.forward(g, v)?;
            weighted_sum(g.tape, y)
        })?,
    );
    let (p, b) = build(seed, |i| UpsampleBlock::new(i, "up", 3, 2, 0.3))?;
    push(
        "upsample_block",
        module_gradcheck(&p, &x, Mode::Train, seed, OP_TOLERANCE, |g, v| {
            let y = b.forward(g, v)?;
            weighted_sum(g.tape, y)
        })?,
    );

    let xf = uniform(&[2, 4, 5, 5], &mut rng, -1.0, 1.0);
    let (p, m) = build(seed, |i| FocalModulation::new(i, "fmam", 4, &[3, 5], 0.3))?;
    push(
        "focal_modulation",
        module_gradcheck(&p, &xf, Mode::Train, seed, OP_TOLERANCE, |g, v| {
            let y = m.forward(g, v)?;
            weighted_sum(g.tape, y)
        })?,
    );

    let xr = uniform(&[2, 2, 16, 16], &mut rng, -1.0, 1.0);
    let (p, m) = build(seed, |i| RegionAwareAttention::new(i, "raam", 2))?;
    push(
        "region_aware_attention",
        module_gradcheck(&p, &xr, Mode::Train, seed, OP_TOLERANCE, |g, v| {
            let y = m.forward(g, v)?;
            weighted_sum(g.tape, y)
        })?,
    );
    Ok(out)
}

/// The `tiny` preset on a `2 x 3 x 16 x 16` batch: dice loss of the full
/// network, train mode, checked w.r.t. every parameter.
pub fn model_check(seed: u64) -> Result<CheckResult> {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::preset("tiny")?
    };
    let net = LfraNet::<f64>::new(&cfg)?;
    let mut rng = rng::stream(seed, 0, 3);
    let s = MODEL_SIZE;
    let x = uniform(&[2, 3, s, s], &mut rng, 0.0, 1.0);
    let mask = Tensor::from_fn([2, 1, s, s], |_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 });
    let result = module_gradcheck(&net.params, &x, Mode::Train, seed, MODEL_TOLERANCE, |g, v| {
        let y = net.forward(g, v)?;
        g.tape.dice_loss(y, &mask, 1.0, 1.0)
    })?;
    Ok(CheckResult {
        name: "lfra_net_tiny".to_string(),
        result,
    })
}

/// Every check above, in order.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = op_checks(seed)?;
    all.extend(dice_checks(seed)?);
    all.extend(module_checks(seed)?);
    all.push(model_check(seed)?);
    Ok(all)
}
