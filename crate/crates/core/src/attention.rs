//! Focal modulation (bottleneck) and region-aware attention (skip
//! connections).

use alloc::vec::Vec;

use crate::autodiff::{Conv2dOptions, PoolKind, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, DepthwiseConv2d, Graph, Init};
use crate::tensor::Scalar;

/// Channel groups of the region-aware attention map.
pub const RAAM_GROUPS: usize = 2;
/// Channels per group.
pub const RAAM_GROUP_CHANNELS: usize = 16;
/// Total reduction of the cascaded 4x4 then 2x2 pooling.
pub const RAAM_STRIDE: usize = 8;

/// Focal modulation.
///
/// A value projection `z0` is refined by a stack of depthwise convolutions
/// (each followed by LeakyReLU) into levels `z1..zL`; the global average of
/// `zL` is broadcast back as level `L + 1`. A 1x1 gate projection of the
/// input yields one map per level, the gated levels are summed into `Z`, and
/// the output is `q(x) * h(Z)`.
#[derive(Debug, Clone)]
pub struct FocalModulation {
    pub channels: usize,
    pub slope: f64,
    value: Conv2d,
    levels: Vec<DepthwiseConv2d>,
    pub gates: Conv2d,
    query: Conv2d,
    pub modulator: Conv2d,
}

impl FocalModulation {
    /// `kernels` lists the depthwise kernel of each focal level (all odd).
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        channels: usize,
        kernels: &[usize],
        slope: f64,
    ) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::InvalidConfig {
                field: "focal_kernels",
                reason: "at least one focal level is required".into(),
            });
        }
        let mut s = init.scope(name);
        let one = Conv2dOptions::default();
        let value = Conv2d::new(&mut s, "value", (channels, channels), 1, one, true)?;
        let levels = kernels
            .iter()
            .enumerate()
            .map(|(l, &k)| DepthwiseConv2d::new(&mut s, &alloc::format!("level{}", l + 1), channels, k, true))
            .collect::<Result<Vec<_>>>()?;
        let gates = Conv2d::new(&mut s, "gates", (channels, kernels.len() + 1), 1, one, true)?;
        let query = Conv2d::new(&mut s, "query", (channels, channels), 1, one, true)?;
        let modulator = Conv2d::new(&mut s, "modulator", (channels, channels), 1, one, true)?;
        Ok(FocalModulation {
            channels,
            slope,
            value,
            levels,
            gates,
            query,
            modulator,
        })
    }

    /// Number of gate maps (focal levels plus the global level).
    pub fn gate_count(&self) -> usize {
        self.levels.len() + 1
    }

    pub fn kernels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.kernel).collect()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, c, _, _) = g.tape.value(x).expect_nchw("fmam")?;
        if c != self.channels {
            return Err(Error::ChannelMismatch {
                op: "fmam",
                expected: self.channels,
                found: c,
            });
        }
        let mut z = self.value.forward(g, x)?;
        let mut levels = Vec::with_capacity(self.gate_count());
        for dw in &self.levels {
            let d = dw.forward(g, z)?;
            z = g.tape.leaky_relu(d, self.slope);
            levels.push(z);
        }
        let pooled = g.tape.global_avg_pool(z)?;
        let shape = g.tape.shape(z).clone();
        levels.push(g.tape.expand(pooled, &shape)?);

        let gates = self.gates.forward(g, x)?;
        let mut acc = None;
        for (l, &zl) in levels.iter().enumerate() {
            let gate = g.tape.channel_slice(gates, l, 1)?;
            let term = g.tape.mul(zl, gate)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.tape.add(a, term)?,
            });
        }
        let z_out = acc.expect("at least one level");
        let q = self.query.forward(g, x)?;
        let h = self.modulator.forward(g, z_out)?;
        g.tape.mul(q, h)
    }
}

/// Region-aware attention on a skip connection.
///
/// `m = ReLU(BN(conv3x3(skip)))` has 32 channels; [`raam_attention`]
/// reduces it to one map at 1/8 resolution, which is upsampled (nearest)
/// and multiplied onto every channel of the skip.
#[derive(Debug, Clone)]
pub struct RegionAwareAttention {
    pub channels: usize,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl RegionAwareAttention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut s = init.scope(name);
        let width = RAAM_GROUPS * RAAM_GROUP_CHANNELS;
        Ok(RegionAwareAttention {
            channels,
            conv: Conv2d::new(
                &mut s,
                "conv",
                (channels, width),
                3,
                Conv2dOptions::default().padding(1),
                true,
            )?,
            bn: BatchNorm2d::new(&mut s, "bn", width)?,
        })
    }

    /// Attention features `m` of a skip tensor.
    pub fn features<T: Scalar>(&self, g: &mut Graph<'_, T>, skip: Var) -> Result<Var> {
        check_divisible(g.tape, skip, "raam")?;
        let m = self.conv.forward(g, skip)?;
        let m = self.bn.forward(g, m)?;
        Ok(g.tape.relu(m))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, skip: Var) -> Result<Var> {
        let m = self.features(g, skip)?;
        let att = raam_attention(g.tape, m)?;
        let up = g.tape.upsample_nearest(att, RAAM_STRIDE)?;
        g.tape.mul(skip, up)
    }
}

fn check_divisible<T: Scalar>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<()> {
    let (_, _, h, w) = tape.value(x).expect_nchw(op)?;
    if h % RAAM_STRIDE != 0 || w % RAAM_STRIDE != 0 {
        return Err(Error::Indivisible {
            op,
            shape: tape.shape(x).clone(),
            divisor: RAAM_STRIDE,
        });
    }
    Ok(())
}

/// Region-aware attention map of 32-channel features `m`.
///
/// `m1 = maxpool2(maxpool4(m))`, `m2 = avgpool2(avgpool4(m))`, `S = m1 * m2`.
/// `C_A` is the per-group channel mean of `m` (2 groups of 16), pooled to
/// `S`'s resolution by the same average cascade. `S` is reduced to 2 group
/// maps the same way, and the map is the mean over groups of
/// `S_i * C_A(i)`. Output is `N x 1 x H/8 x W/8`.
pub fn raam_attention<T: Scalar>(tape: &mut Tape<T>, m: Var) -> Result<Var> {
    const OP: &str = "raam_attention";
    let (_, c, _, _) = tape.value(m).expect_nchw(OP)?;
    let width = RAAM_GROUPS * RAAM_GROUP_CHANNELS;
    if c != width {
        return Err(Error::ChannelMismatch {
            op: OP,
            expected: width,
            found: c,
        });
    }
    check_divisible(tape, m, OP)?;
    let cascade = |tape: &mut Tape<T>, x: Var, kind: PoolKind| -> Result<Var> {
        let p = tape.pool2d(x, kind, 4, 4)?;
        tape.pool2d(p, kind, 2, 2)
    };
    let m1 = cascade(tape, m, PoolKind::Max)?;
    let m2 = cascade(tape, m, PoolKind::Avg)?;
    let s = tape.mul(m1, m2)?;
    let ca = tape.group_channel_mean(m, RAAM_GROUPS)?;
    let ca = cascade(tape, ca, PoolKind::Avg)?;
    let sg = tape.group_channel_mean(s, RAAM_GROUPS)?;
    let prod = tape.mul(sg, ca)?;
    tape.group_channel_mean(prod, 1)
}

#[cfg(test)]
mod tests;
