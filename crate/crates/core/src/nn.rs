//! Parameters, the forward-pass context and the composite network blocks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{BatchMoments, Conv2dOptions, ConvTransposeOptions, Mode, NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by the optimizer.
    Trainable,
    /// Batch-norm running statistic, updated from batch moments.
    Statistic,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Trainable => "param",
            ParamKind::Statistic => "stat",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Named tensors of one model, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(
                "param_store",
                format!("duplicate parameter name `{name}`"),
            ));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, kind });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalars; running statistics are excluded.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Number of stored scalars, statistics included.
    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Folds batch moments into the running statistics:
    /// `r <- (1 - momentum) r + momentum b`, with the unbiased batch variance.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) {
        for u in updates {
            let m = T::from_f64(u.momentum);
            let keep = T::ONE - m;
            let n = u.moments.count;
            let correction = if n > 1 {
                T::from_usize(n) / T::from_usize(n - 1)
            } else {
                T::ONE
            };
            for (r, &b) in self.params[u.mean.0].value.data_mut().iter_mut().zip(&u.moments.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.params[u.var.0].value.data_mut().iter_mut().zip(&u.moments.var) {
                *r = keep * *r + m * b * correction;
            }
        }
    }
}

/// Pending running-statistic update from one train-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub moments: BatchMoments<T>,
}

/// Registers parameters under a hierarchical name prefix and draws their
/// initial values.
///
/// Values are drawn in `f64` and cast, so `f32` and `f64` models built from
/// the same seed hold the same (rounded) weights.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut StreamRng,
    prefix: String,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut StreamRng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A child scope whose names are prefixed by `name.`.
    pub fn scope(&mut self, name: &str) -> Init<'_, T> {
        Init {
            prefix: self.name(name),
            store: self.store,
            rng: self.rng,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            String::from(leaf)
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    /// Glorot-uniform tensor: `U(-l, l)` with `l = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(&mut self, leaf: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-limit..limit)));
        self.store.add(self.name(leaf), value, ParamKind::Trainable)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64, kind: ParamKind) -> Result<ParamId> {
        self.store
            .add(self.name(leaf), Tensor::full(shape, T::from_f64(value)), kind)
    }
}

/// Forward-pass context: a tape plus the parameters bound onto it.
///
/// Parameters become tape leaves on first use. Train-mode batch norm
/// records [`StatUpdate`]s instead of mutating the store, so a forward pass
/// only needs shared access to the parameters.
pub struct Graph<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    params: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: StreamRng,
    updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// `rng` drives dropout; it is unused in [`Mode::Infer`].
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, mode: Mode, rng: StreamRng) -> Self {
        Graph {
            tape,
            params,
            bound: vec![None; params.len()],
            mode,
            rng,
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    /// The tape node holding parameter `id`.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let v = self.tape.leaf(p.value.clone(), p.kind == ParamKind::Trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Uses `var` in place of parameter `id`. Must precede the first use.
    pub fn bind(&mut self, id: ParamId, var: Var) -> Result<()> {
        if self.bound[id.0].is_some() {
            return Err(Error::invalid("bind", "parameter already bound"));
        }
        if self.tape.shape(var) != self.params.value(id).shape() {
            return Err(Error::ShapeMismatch {
                op: "bind",
                lhs: self.params.value(id).shape().clone(),
                rhs: self.tape.shape(var).clone(),
            });
        }
        self.bound[id.0] = Some(var);
        Ok(())
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.tape.dropout(x, p, self.mode, &mut self.rng)
    }

    /// Gradients of every trainable parameter used so far, zeros where
    /// the backward pass did not reach.
    pub fn grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter(|(i, _)| self.params.params[*i].kind == ParamKind::Trainable)
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), self.tape.grad_or_zeros(v))))
            .collect()
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        core::mem::take(&mut self.updates)
    }
}

fn check_channels<T: Scalar>(g: &Graph<'_, T>, x: Var, op: &'static str, expected: usize) -> Result<()> {
    let (_, c, _, _) = g.tape.value(x).expect_nchw(op)?;
    if c != expected {
        return Err(Error::ChannelMismatch { op, expected, found: c });
    }
    Ok(())
}

// ------------------------------------------------------------------ layers

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub opts: Conv2dOptions,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        (cin, cout): (usize, usize),
        kernel: usize,
        opts: Conv2dOptions,
        bias: bool,
    ) -> Result<Self> {
        let mut s = init.scope(name);
        let g = opts.groups;
        let weight = s.glorot(
            "weight",
            &[cout, cin / g, kernel, kernel],
            cin / g * kernel * kernel,
            cout / g * kernel * kernel,
        )?;
        let bias = if bias {
            Some(s.constant("bias", &[cout], 0.0, ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel,
            opts,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        check_channels(g, x, "conv2d", self.in_channels)?;
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.conv2d(x, w, b, self.opts)
    }
}

/// Depthwise convolution with "same" padding and an odd kernel.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub channels: usize,
    pub kernel: usize,
}

impl DepthwiseConv2d {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        channels: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::EvenKernel {
                op: "depthwise_conv2d",
                kernel,
            });
        }
        let mut s = init.scope(name);
        let weight = s.glorot(
            "weight",
            &[channels, 1, kernel, kernel],
            kernel * kernel,
            kernel * kernel,
        )?;
        let bias = if bias {
            Some(s.constant("bias", &[channels], 0.0, ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(DepthwiseConv2d {
            weight,
            bias,
            channels,
            kernel,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        check_channels(g, x, "depthwise_conv2d", self.channels)?;
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.depthwise_conv2d(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub opts: ConvTransposeOptions,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        (cin, cout): (usize, usize),
        kernel: usize,
        opts: ConvTransposeOptions,
    ) -> Result<Self> {
        let mut s = init.scope(name);
        let kk = kernel * kernel;
        let weight = s.glorot("weight", &[cin, cout, kernel, kernel], cout * kk, cin * kk)?;
        let bias = Some(s.constant("bias", &[cout], 0.0, ParamKind::Trainable)?);
        Ok(ConvTranspose2d {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel,
            opts,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        check_channels(g, x, "conv_transpose2d", self.in_channels)?;
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.conv_transpose2d(x, w, b, self.opts)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(BatchNorm2d {
            gamma: s.constant("gamma", &[channels], 1.0, ParamKind::Trainable)?,
            beta: s.constant("beta", &[channels], 0.0, ParamKind::Trainable)?,
            running_mean: s.constant("running_mean", &[channels], 0.0, ParamKind::Statistic)?,
            running_var: s.constant("running_var", &[channels], 1.0, ParamKind::Statistic)?,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    /// Batch statistics in train mode (recording a running-stat update),
    /// running statistics in infer mode.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        check_channels(g, x, "batch_norm2d", self.channels)?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let store = g.params;
        let stats = match g.mode {
            Mode::Train => NormStats::Batch,
            Mode::Infer => NormStats::Running {
                mean: store.value(self.running_mean).data(),
                var: store.value(self.running_var).data(),
            },
        };
        let (y, moments) = g.tape.batch_norm(x, gamma, beta, stats, self.eps)?;
        if let Some(moments) = moments {
            g.updates.push(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                momentum: self.momentum,
                moments,
            });
        }
        Ok(y)
    }
}

// ------------------------------------------------------------------ blocks

/// Multiscale convolution block.
///
/// Parallel 1x1, 3x3 and dilated 3x3 branches (each `c` channels) are
/// concatenated, normalized, dropped out and activated, then fused by a 3x3
/// convolution back to `c` channels with the same BN / dropout / activation
/// tail. With `multiscale` off only the 3x3 branch exists, which gives the
/// plain double-convolution block of a lightweight U-Net.
#[derive(Debug, Clone)]
pub struct MsConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
    pub dropout: f64,
    pub slope: f64,
    branch1: Option<Conv2d>,
    branch3: Conv2d,
    branch_dilated: Option<Conv2d>,
    bn_concat: BatchNorm2d,
    fuse: Conv2d,
    bn_fuse: BatchNorm2d,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockOptions {
    pub dilation: usize,
    pub dropout: f64,
    pub slope: f64,
    pub multiscale: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        BlockOptions {
            dilation: 2,
            dropout: 0.5,
            slope: 0.3,
            multiscale: true,
        }
    }
}

impl MsConvBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, c: usize, o: BlockOptions) -> Result<Self> {
        if o.dilation == 0 {
            return Err(Error::InvalidConfig {
                field: "dilation",
                reason: "must be positive".into(),
            });
        }
        let mut s = init.scope(name);
        let same = Conv2dOptions::default().padding(1);
        let branch1 = if o.multiscale {
            Some(Conv2d::new(
                &mut s,
                "branch1x1",
                (cin, c),
                1,
                Conv2dOptions::default(),
                true,
            )?)
        } else {
            None
        };
        let branch3 = Conv2d::new(&mut s, "branch3x3", (cin, c), 3, same, true)?;
        let branch_dilated = if o.multiscale {
            let opts = Conv2dOptions::default().dilation(o.dilation).padding(o.dilation);
            Some(Conv2d::new(&mut s, "branch_dilated", (cin, c), 3, opts, true)?)
        } else {
            None
        };
        let width = if o.multiscale { 3 * c } else { c };
        let bn_concat = BatchNorm2d::new(&mut s, "bn_concat", width)?;
        let fuse = Conv2d::new(&mut s, "fuse", (width, c), 3, same, true)?;
        let bn_fuse = BatchNorm2d::new(&mut s, "bn_fuse", c)?;
        Ok(MsConvBlock {
            in_channels: cin,
            out_channels: c,
            dilation: o.dilation,
            dropout: o.dropout,
            slope: o.slope,
            branch1,
            branch3,
            branch_dilated,
            bn_concat,
            fuse,
            bn_fuse,
        })
    }

    pub fn is_multiscale(&self) -> bool {
        self.branch1.is_some()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        check_channels(g, x, "ms_conv", self.in_channels)?;
        let mut branches = Vec::with_capacity(3);
        if let Some(b) = &self.branch1 {
            branches.push(b.forward(g, x)?);
        }
        branches.push(self.branch3.forward(g, x)?);
        if let Some(b) = &self.branch_dilated {
            branches.push(b.forward(g, x)?);
        }
        let cat = g.tape.concat_channels(&branches)?;
        let h = self.bn_concat.forward(g, cat)?;
        let h = g.dropout(h, self.dropout)?;
        let h = g.tape.leaky_relu(h, self.slope);
        let f = self.fuse.forward(g, h)?;
        let f = self.bn_fuse.forward(g, f)?;
        let f = g.dropout(f, self.dropout)?;
        Ok(g.tape.leaky_relu(f, self.slope))
    }
}

/// `LeakyReLU(BN(conv 2x2, stride 2))`: halves both spatial extents.
#[derive(Debug, Clone)]
pub struct DownsampleBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub slope: f64,
}

impl DownsampleBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, slope: f64) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(DownsampleBlock {
            conv: Conv2d::new(&mut s, "conv", (cin, cout), 2, Conv2dOptions::default().stride(2), true)?,
            bn: BatchNorm2d::new(&mut s, "bn", cout)?,
            slope,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.tape.value(x).expect_nchw("downsample")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Indivisible {
                op: "downsample",
                shape: g.tape.shape(x).clone(),
                divisor: 2,
            });
        }
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.tape.leaky_relu(y, self.slope))
    }
}

/// `LeakyReLU(BN(transposed conv 3x3, stride 2, pad 1, output pad 1))`:
/// doubles both spatial extents.
#[derive(Debug, Clone)]
pub struct UpsampleBlock {
    pub conv: ConvTranspose2d,
    pub bn: BatchNorm2d,
    pub slope: f64,
}

impl UpsampleBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, slope: f64) -> Result<Self> {
        let mut s = init.scope(name);
        let opts = ConvTransposeOptions::default().stride(2).padding(1).output_padding(1);
        Ok(UpsampleBlock {
            conv: ConvTranspose2d::new(&mut s, "conv", (cin, cout), 3, opts)?,
            bn: BatchNorm2d::new(&mut s, "bn", cout)?,
            slope,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.tape.leaky_relu(y, self.slope))
    }
}

/// Runs `f` in infer mode on a fresh tape and returns the value of its output.
pub fn infer<T: Scalar>(
    params: &ParamStore<T>,
    input: &Tensor<T>,
    f: impl FnOnce(&mut Graph<'_, T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let mut g = Graph::new(&mut tape, params, Mode::Infer, crate::rng::stream(0, 0, 0));
    let y = f(&mut g, x)?;
    drop(g);
    Ok(tape.value(y).clone())
}
