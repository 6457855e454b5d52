//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is a Wengert list: every operation appends a node holding its
//! value and the data its backward rule needs. Nodes only reference earlier
//! nodes, so the graph is acyclic by construction and a reverse scan is a
//! valid topological order.

mod broadcast;
mod gradcheck;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvLayout, Geom, TransposeLayout};
use crate::kernels::pool;
pub use crate::kernels::pool::PoolKind;
use crate::tensor::{Scalar, Shape, Tensor};
use broadcast::BroadcastMap;
pub use gradcheck::{finite_diff_check, GradCheck};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }
    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }
    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }
    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTransposeOptions {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub output_padding: (usize, usize),
}

impl Default for ConvTransposeOptions {
    fn default() -> Self {
        ConvTransposeOptions {
            stride: (1, 1),
            padding: (0, 0),
            output_padding: (0, 0),
        }
    }
}

impl ConvTransposeOptions {
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }
    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }
    pub fn output_padding(mut self, p: usize) -> Self {
        self.output_padding = (p, p);
        self
    }
}

/// Statistics source for [`Tape::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with externally tracked running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-channel mean and biased variance of a batch-norm input.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of values each channel statistic was taken over.
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        layout: ConvLayout,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        layout: TransposeLayout,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        k: usize,
        s: usize,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: Var,
        alpha: T,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Concat {
        xs: Vec<Var>,
    },
    Binary {
        a: Var,
        b: Var,
        op: BinaryOp,
    },
    Expand {
        x: Var,
    },
    ChannelSlice {
        x: Var,
        start: usize,
    },
    GroupMean {
        x: Var,
        groups: usize,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Dice {
        pred: Var,
        weights: Vec<T>,
        target: Vec<T>,
        num: T,
        den: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape. One tape records one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input node. Gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, or `None` if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Accumulated gradient of `v`, zeros if nothing has been accumulated.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v).clone()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Shape, data: Vec<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn nchw(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        self.value(v).expect_nchw(op)
    }

    // ---------------------------------------------------------------- convs

    /// 2-D convolution. `w` is `[cout, cin / groups, kh, kw]`, `b` is `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, cin, h, wd) = self.nchw(x, OP)?;
        let (cout, cin_g, kh, kw) = self.nchw(w, OP)?;
        let groups = opts.groups;
        if groups == 0 || opts.stride.0 == 0 || opts.stride.1 == 0 || opts.dilation.0 == 0 || opts.dilation.1 == 0 {
            return Err(Error::invalid(OP, "stride, dilation and groups must be positive"));
        }
        if cin_g * groups != cin || cout % groups != 0 {
            return Err(Error::ShapeMismatch {
                op: OP,
                lhs: self.shape(x).clone(),
                rhs: self.shape(w).clone(),
            });
        }
        if let Some(b) = b {
            if self.shape(b).dims() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    lhs: self.shape(w).clone(),
                    rhs: self.shape(b).clone(),
                });
            }
        }
        let (ho, wo) = match (
            conv::out_extent(h, kh, opts.stride.0, opts.padding.0, opts.dilation.0),
            conv::out_extent(wd, kw, opts.stride.1, opts.padding.1, opts.dilation.1),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::EmptyOutput {
                    op: OP,
                    input: self.shape(x).clone(),
                })
            }
        };
        let layout = ConvLayout {
            n,
            groups,
            cout_g: cout / groups,
            geom: Geom {
                c: cin_g,
                h,
                w: wd,
                kh,
                kw,
                sh: opts.stride.0,
                sw: opts.stride.1,
                ph: opts.padding.0,
                pw: opts.padding.1,
                dh: opts.dilation.0,
                dw: opts.dilation.1,
                ho,
                wo,
            },
        };
        let y = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &layout,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            Shape(vec![n, cout, ho, wo]),
            y,
            Op::Conv2d { x, w, b, layout },
            &parents,
        ))
    }

    /// Depthwise convolution with "same" padding. `w` is `[c, 1, k, k]`, `k` odd.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (_, c, _, _) = self.nchw(x, "depthwise_conv2d")?;
        let (wc, one, kh, kw) = self.nchw(w, "depthwise_conv2d")?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::EvenKernel {
                op: "depthwise_conv2d",
                kernel: if kh % 2 == 0 { kh } else { kw },
            });
        }
        if wc != c || one != 1 {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv2d",
                lhs: self.shape(x).clone(),
                rhs: self.shape(w).clone(),
            });
        }
        let mut opts = Conv2dOptions::default().groups(c);
        opts.padding = ((kh - 1) / 2, (kw - 1) / 2);
        self.conv2d(x, w, b, opts)
    }

    /// Transposed convolution. `w` is `[cin, cout, kh, kw]`; output extent is
    /// `(h - 1) * stride - 2 * pad + k + output_padding`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: ConvTransposeOptions) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let (n, cin, h, wd) = self.nchw(x, OP)?;
        let (wcin, cout, kh, kw) = self.nchw(w, OP)?;
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: OP,
                lhs: self.shape(x).clone(),
                rhs: self.shape(w).clone(),
            });
        }
        if let Some(b) = b {
            if self.shape(b).dims() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    lhs: self.shape(w).clone(),
                    rhs: self.shape(b).clone(),
                });
            }
        }
        let (sh, sw) = opts.stride;
        let (ph, pw) = opts.padding;
        let (oph, opw) = opts.output_padding;
        if sh == 0 || sw == 0 || oph >= sh || opw >= sw {
            return Err(Error::invalid(
                OP,
                "stride must be positive and output padding below stride",
            ));
        }
        let full_h = (h - 1) * sh + kh + oph;
        let full_w = (wd - 1) * sw + kw + opw;
        if full_h <= 2 * ph || full_w <= 2 * pw {
            return Err(Error::EmptyOutput {
                op: OP,
                input: self.shape(x).clone(),
            });
        }
        let (ho, wo) = (full_h - 2 * ph, full_w - 2 * pw);
        let layout = TransposeLayout {
            n,
            cin,
            adj: Geom {
                c: cout,
                h: ho,
                w: wo,
                kh,
                kw,
                sh,
                sw,
                ph,
                pw,
                dh: 1,
                dw: 1,
                ho: h,
                wo: wd,
            },
        };
        let y = conv::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &layout,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            Shape(vec![n, cout, ho, wo]),
            y,
            Op::ConvTranspose2d { x, w, b, layout },
            &parents,
        ))
    }

    // -------------------------------------------------------------- pooling

    /// Square pooling with floor semantics: trailing rows and columns that do
    /// not fill a window are dropped.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, kernel: usize, stride: usize) -> Result<Var> {
        const OP: &str = "pool2d";
        let (n, c, h, w) = self.nchw(x, OP)?;
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid(OP, "kernel and stride must be positive"));
        }
        if kernel > h || kernel > w {
            return Err(Error::KernelTooLarge {
                op: OP,
                kernel,
                input: self.shape(x).clone(),
            });
        }
        let (y, argmax) = pool::pool_forward(self.value(x).data(), n * c, (h, w), kind, kernel, stride);
        let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        Ok(self.push(
            Shape(vec![n, c, ho, wo]),
            y,
            Op::Pool {
                x,
                kind,
                k: kernel,
                s: stride,
                argmax,
            },
            &[x],
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x, "global_avg_pool")?;
        let plane = h * w;
        let inv = T::ONE / T::from_usize(plane);
        let y = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().fold(T::ZERO, |a, &v| a + v) * inv)
            .collect();
        Ok(self.push(Shape(vec![n, c, 1, 1]), y, Op::GlobalAvgPool { x }, &[x]))
    }

    // ------------------------------------------------------------ batchnorm

    /// Batch normalization over `(n, h, w)` per channel. With
    /// [`NormStats::Batch`] the moments of this batch are also returned so the
    /// caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        const OP: &str = "batch_norm2d";
        let (n, c, h, w) = self.nchw(x, OP)?;
        for p in [gamma, beta] {
            if self.shape(p).dims() != [c] {
                return Err(Error::ChannelMismatch {
                    op: OP,
                    expected: c,
                    found: self.shape(p).numel(),
                });
            }
        }
        let plane = h * w;
        let count = n * plane;
        let xs = self.value(x).data();
        let eps = T::from_f64(eps);
        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                let inv_count = T::ONE / T::from_usize(count);
                let mut mean = vec![T::ZERO; c];
                let mut var = vec![T::ZERO; c];
                for ci in 0..c {
                    let mut acc = T::ZERO;
                    for ni in 0..n {
                        for &v in &xs[(ni * c + ci) * plane..][..plane] {
                            acc += v;
                        }
                    }
                    let m = acc * inv_count;
                    let mut sq = T::ZERO;
                    for ni in 0..n {
                        for &v in &xs[(ni * c + ci) * plane..][..plane] {
                            let d = v - m;
                            sq += d * d;
                        }
                    }
                    mean[ci] = m;
                    var[ci] = sq * inv_count;
                }
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(moments))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::ChannelMismatch {
                        op: OP,
                        expected: c,
                        found: mean.len(),
                    });
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::ZERO; xs.len()];
        let mut y = vec![T::ZERO; xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for i in off..off + plane {
                    let xh = (xs[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    y[i] = g[ci] * xh + bt[ci];
                }
            }
        }
        let shape = self.shape(x).clone();
        let v = self.push(
            shape,
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: moments.is_some(),
            },
            &[x, gamma, beta],
        );
        Ok((v, moments))
    }

    // ---------------------------------------------------------- elementwise

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let alpha = T::from_f64(alpha);
        let y = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::ZERO { v } else { v * alpha })
            .collect();
        let shape = self.shape(x).clone();
        self.push(shape, y, Op::LeakyRelu { x, alpha }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).clone();
        self.push(shape, y, Op::Sigmoid { x }, &[x])
    }

    /// Inverted dropout: in [`Mode::Train`] each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`. In
    /// [`Mode::Infer`], or when `p == 0`, `x` is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(
                "dropout",
                alloc::format!("probability {p} outside [0, 1)"),
            ));
        }
        if mode == Mode::Infer || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { T::ZERO } else { keep })
            .collect();
        let y = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).clone();
        Ok(self.push(shape, y, Op::Dropout { x, mask }, &[x]))
    }

    /// Concatenation along the channel axis, in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *xs.first().ok_or_else(|| Error::invalid(OP, "no inputs"))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let (n, _, h, w) = self.nchw(first, OP)?;
        let mut total = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.nchw(v, OP)?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    lhs: self.shape(first).clone(),
                    rhs: self.shape(v).clone(),
                });
            }
            total += vc;
        }
        let plane = h * w;
        let mut y = Vec::with_capacity(n * total * plane);
        for ni in 0..n {
            for &v in xs {
                let t = self.value(v);
                let len = t.dims()[1] * plane;
                y.extend_from_slice(&t.data()[ni * len..(ni + 1) * len]);
            }
        }
        Ok(self.push(Shape(vec![n, total, h, w]), y, Op::Concat { xs: xs.to_vec() }, xs))
    }

    /// `a op b` where `b` has `a`'s rank and each extent equal to `a`'s or 1.
    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let map = BroadcastMap::new(self.shape(a), self.shape(b)).ok_or_else(|| Error::ShapeMismatch {
            op: "elementwise",
            lhs: self.shape(a).clone(),
            rhs: self.shape(b).clone(),
        })?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(av.len());
        map.for_each(|i, j| {
            y.push(match op {
                BinaryOp::Add => av[i] + bv[j],
                BinaryOp::Mul => av[i] * bv[j],
            })
        });
        let shape = self.shape(a).clone();
        Ok(self.push(shape, y, Op::Binary { a, b, op }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    /// Replicates `x` along its extent-1 axes to `shape`.
    pub fn expand(&mut self, x: Var, shape: &Shape) -> Result<Var> {
        let map = BroadcastMap::new(shape, self.shape(x)).ok_or_else(|| Error::ShapeMismatch {
            op: "expand",
            lhs: shape.clone(),
            rhs: self.shape(x).clone(),
        })?;
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(shape.numel());
        map.for_each(|_, j| y.push(xv[j]));
        Ok(self.push(shape.clone(), y, Op::Expand { x }, &[x]))
    }

    /// Channels `start..start + len` of `x`.
    pub fn channel_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x, "channel_slice")?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "channel_slice",
                alloc::format!("channels {start}..{} out of range for {c}", start + len),
            ));
        }
        let plane = h * w;
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(n * len * plane);
        for ni in 0..n {
            y.extend_from_slice(&xv[(ni * c + start) * plane..(ni * c + start + len) * plane]);
        }
        Ok(self.push(Shape(vec![n, len, h, w]), y, Op::ChannelSlice { x, start }, &[x]))
    }

    /// Splits the channels into `groups` consecutive groups and averages each
    /// group into one channel.
    pub fn group_channel_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x, "group_channel_mean")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::ChannelMismatch {
                op: "group_channel_mean",
                expected: groups,
                found: c,
            });
        }
        let per = c / groups;
        let plane = h * w;
        let inv = T::ONE / T::from_usize(per);
        let xv = self.value(x).data();
        let mut y = vec![T::ZERO; n * groups * plane];
        for ni in 0..n {
            for g in 0..groups {
                let dst = &mut y[(ni * groups + g) * plane..][..plane];
                for m in 0..per {
                    let src = &xv[(ni * c + g * per + m) * plane..][..plane];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
        }
        Ok(self.push(Shape(vec![n, groups, h, w]), y, Op::GroupMean { x, groups }, &[x]))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x, "upsample_nearest")?;
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be positive"));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                let row = &src[(i / factor) * w..][..w];
                for j in 0..wo {
                    y.push(row[j / factor]);
                }
            }
        }
        Ok(self.push(Shape(vec![n, c, ho, wo]), y, Op::UpsampleNearest { x, factor }, &[x]))
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Shape(vec![1]), vec![s], Op::Sum { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::from_f64(factor);
        let y = self.value(x).data().iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).clone();
        self.push(shape, y, Op::Scale { x, factor }, &[x])
    }

    /// Soft dice loss `1 - (2·Σωpg + ε) / (Σωp + Σωg + ε)` over every element
    /// of the batch, where `ω` is `foreground_weight` on target pixels and 1
    /// elsewhere.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>, eps: f64, foreground_weight: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "dice_loss",
                lhs: self.shape(pred).clone(),
                rhs: target.shape().clone(),
            });
        }
        if !(eps > 0.0) || !(foreground_weight > 0.0) {
            return Err(Error::invalid("dice_loss", "epsilon and weight must be positive"));
        }
        let half = T::from_f64(0.5);
        let fw = T::from_f64(foreground_weight);
        let weights: Vec<T> = target
            .data()
            .iter()
            .map(|&g| if g > half { fw } else { T::ONE })
            .collect();
        let p = self.value(pred).data();
        let (mut inter, mut sp, mut sg) = (T::ZERO, T::ZERO, T::ZERO);
        for ((&pi, &gi), &wi) in p.iter().zip(target.data()).zip(&weights) {
            inter += wi * pi * gi;
            sp += wi * pi;
            sg += wi * gi;
        }
        let eps = T::from_f64(eps);
        let num = T::from_f64(2.0) * inter + eps;
        let den = sp + sg + eps;
        let loss = T::ONE - num / den;
        Ok(self.push(
            Shape(vec![1]),
            vec![loss],
            Op::Dice {
                pred,
                weights,
                target: target.data().to_vec(),
                num,
                den,
            },
            &[pred],
        ))
    }

    // ------------------------------------------------------------- backward

    /// Accumulates `d root / d node` into the gradient of every reachable node
    /// that requires gradients. Repeated calls accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root).numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).clone()));
        }
        if !self.requires_grad(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::ONE]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, &v) in acc.data_mut().iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => node.grad = Some(Tensor::from_parts(node.value.shape().clone(), g)),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn take_grad(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Vec<T> {
        grads[v.0]
            .take()
            .unwrap_or_else(|| vec![T::ZERO; self.nodes[v.0].value.numel()])
    }

    /// Adds `f(i)` to element `i` of `v`'s pending gradient.
    fn add_grad(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if !self.wants(v) {
            return;
        }
        let mut buf = self.take_grad(grads, v);
        for (i, b) in buf.iter_mut().enumerate() {
            *b += f(i);
        }
        grads[v.0] = Some(buf);
    }

    fn with_grad(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let mut buf = self.take_grad(grads, v);
        f(&mut buf);
        grads[v.0] = Some(buf);
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, layout } => {
                let (x, w) = (*x, *w);
                let mut dx = self.wants(x).then(|| self.take_grad(grads, x));
                let mut dw = self.wants(w).then(|| self.take_grad(grads, w));
                let mut db = b.filter(|&b| self.wants(b)).map(|b| (b, self.take_grad(grads, b)));
                conv::conv2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    layout,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_mut().map(|(_, d)| d.as_mut_slice()),
                );
                restore(grads, x, dx);
                restore(grads, w, dw);
                if let Some((b, d)) = db {
                    grads[b.0] = Some(d);
                }
            }
            Op::ConvTranspose2d { x, w, b, layout } => {
                let (x, w) = (*x, *w);
                let mut dx = self.wants(x).then(|| self.take_grad(grads, x));
                let mut dw = self.wants(w).then(|| self.take_grad(grads, w));
                let mut db = b.filter(|&b| self.wants(b)).map(|b| (b, self.take_grad(grads, b)));
                conv::conv_transpose2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    layout,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_mut().map(|(_, d)| d.as_mut_slice()),
                );
                restore(grads, x, dx);
                restore(grads, w, dw);
                if let Some((b, d)) = db {
                    grads[b.0] = Some(d);
                }
            }
            Op::Pool { x, kind, k, s, argmax } => {
                let (n, c, h, w) = self.value(*x).nchw().unwrap();
                self.with_grad(grads, *x, |dx| {
                    pool::pool_backward(g, argmax, n * c, (h, w), *kind, *k, *s, dx)
                });
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).nchw().unwrap();
                let plane = h * w;
                let inv = T::ONE / T::from_usize(plane);
                self.add_grad(grads, *x, |i| g[i / plane] * inv);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*x).nchw().unwrap();
                let plane = h * w;
                let count = T::from_usize(n * plane);
                let gm = self.value(*gamma).data();
                // per-channel Σdy and Σdy·x̂
                let mut sum_dy = vec![T::ZERO; c];
                let mut sum_dy_xhat = vec![T::ZERO; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * plane;
                        for j in off..off + plane {
                            sum_dy[ci] += g[j];
                            sum_dy_xhat[ci] += g[j] * xhat[j];
                        }
                    }
                }
                self.add_grad(grads, *gamma, |ci| sum_dy_xhat[ci]);
                self.add_grad(grads, *beta, |ci| sum_dy[ci]);
                let channel = |j: usize| (j / plane) % c;
                if *batch_stats {
                    self.add_grad(grads, *x, |j| {
                        let ci = channel(j);
                        gm[ci] * inv_std[ci] * (g[j] - (sum_dy[ci] + xhat[j] * sum_dy_xhat[ci]) / count)
                    });
                } else {
                    self.add_grad(grads, *x, |j| {
                        let ci = channel(j);
                        g[j] * gm[ci] * inv_std[ci]
                    });
                }
            }
            Op::LeakyRelu { x, alpha } => {
                let xv = self.value(*x).data();
                self.add_grad(grads, *x, |j| if xv[j] > T::ZERO { g[j] } else { g[j] * *alpha });
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data();
                self.add_grad(grads, *x, |j| g[j] * y[j] * (T::ONE - y[j]));
            }
            Op::Dropout { x, mask } => self.add_grad(grads, *x, |j| g[j] * mask[j]),
            Op::Concat { xs } => {
                let (_, total, h, w) = self.nodes[i].value.nchw().unwrap();
                let plane = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).dims()[1];
                    let off = offset;
                    self.add_grad(grads, v, |j| {
                        let ni = j / (c * plane);
                        let r = j % (c * plane);
                        g[ni * total * plane + off * plane + r]
                    });
                    offset += c;
                }
            }
            Op::Binary { a, b, op } => {
                let map = BroadcastMap::new(self.shape(*a), self.shape(*b)).unwrap();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.with_grad(grads, *a, |da| match op {
                        BinaryOp::Add => da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv),
                        BinaryOp::Mul => map.for_each(|ii, jj| da[ii] += g[ii] * bv[jj]),
                    });
                }
                if self.wants(*b) {
                    self.with_grad(grads, *b, |db| match op {
                        BinaryOp::Add => map.for_each(|ii, jj| db[jj] += g[ii]),
                        BinaryOp::Mul => map.for_each(|ii, jj| db[jj] += g[ii] * av[ii]),
                    });
                }
            }
            Op::Expand { x } => {
                let map = BroadcastMap::new(self.nodes[i].value.shape(), self.shape(*x)).unwrap();
                self.with_grad(grads, *x, |dx| map.for_each(|ii, jj| dx[jj] += g[ii]));
            }
            Op::ChannelSlice { x, start } => {
                let (_, c, h, w) = self.value(*x).nchw().unwrap();
                let (_, len, _, _) = self.nodes[i].value.nchw().unwrap();
                let plane = h * w;
                self.with_grad(grads, *x, |dx| {
                    for (ni, chunk) in g.chunks_exact(len * plane).enumerate() {
                        let dst = &mut dx[(ni * c + start) * plane..][..len * plane];
                        dst.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::GroupMean { x, groups } => {
                let (_, c, h, w) = self.value(*x).nchw().unwrap();
                let plane = h * w;
                let per = c / groups;
                let inv = T::ONE / T::from_usize(per);
                self.add_grad(grads, *x, |j| {
                    let ni = j / (c * plane);
                    let ci = (j / plane) % c;
                    g[(ni * groups + ci / per) * plane + j % plane] * inv
                });
            }
            Op::UpsampleNearest { x, factor } => {
                let (_, _, h, w) = self.value(*x).nchw().unwrap();
                let (ho, wo) = (h * factor, w * factor);
                self.with_grad(grads, *x, |dx| {
                    for (p, src) in g.chunks_exact(ho * wo).enumerate() {
                        for oi in 0..ho {
                            for oj in 0..wo {
                                dx[p * h * w + (oi / factor) * w + oj / factor] += src[oi * wo + oj];
                            }
                        }
                    }
                });
            }
            Op::Sum { x } => self.add_grad(grads, *x, |_| g[0]),
            Op::Scale { x, factor } => self.add_grad(grads, *x, |j| g[j] * *factor),
            Op::Dice {
                pred,
                weights,
                target,
                num,
                den,
            } => {
                let two = T::from_f64(2.0);
                let den2 = *den * *den;
                self.add_grad(grads, *pred, |j| {
                    -g[0] * weights[j] * (two * target[j] * *den - *num) / den2
                });
            }
        }
    }
}

fn restore<T>(grads: &mut [Option<Vec<T>>], v: Var, buf: Option<Vec<T>>) {
    if let Some(buf) = buf {
        grads[v.0] = Some(buf);
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}
