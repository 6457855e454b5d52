//! Analytic parameter, FLOP and payload accounting.
//!
//! Conventions: a multiply-add is 2 FLOPs. A convolution costs
//! `2 * k * k * (cin / groups) * cout` per output pixel; a transposed
//! convolution is counted as its equivalent forward convolution, i.e. per
//! *input* pixel. Batch norm, activations, pooling, channel means and
//! elementwise products or sums cost one FLOP per output element; a global
//! average costs one per input element. Dropout (identity at inference),
//! concatenation, broadcasting and nearest upsampling are free.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::ModelConfig;
use crate::attention::{RAAM_GROUPS, RAAM_GROUP_CHANNELS, RAAM_STRIDE};
use crate::error::{Error, Result};

/// Cost of one layer or elementwise stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

/// Aggregate complexity of a configuration at one input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Complexity {
    pub params: usize,
    /// Running statistics (two per batch-norm channel).
    pub statistics: usize,
    pub flops: u64,
}

impl Complexity {
    /// Bytes of the raw little-endian array blob for a given scalar size.
    pub fn payload_bytes(&self, scalar_size: usize) -> usize {
        (self.params + self.statistics) * scalar_size
    }
}

struct Counter {
    rows: Vec<LayerCost>,
    statistics: usize,
}

impl Counter {
    fn push(&mut self, name: String, params: usize, flops: u64) {
        self.rows.push(LayerCost { name, params, flops });
    }

    /// Square conv with bias, output extents `(ho, wo)`.
    fn conv(&mut self, name: String, (cin, cout): (usize, usize), k: usize, groups: usize, (ho, wo): (usize, usize)) {
        let params = k * k * (cin / groups) * cout + cout;
        let flops = 2 * (k * k * (cin / groups) * cout * ho * wo) as u64;
        self.push(name, params, flops);
    }

    fn conv_transpose(&mut self, name: String, (cin, cout): (usize, usize), k: usize, (hi, wi): (usize, usize)) {
        let params = k * k * cin * cout + cout;
        let flops = 2 * (k * k * cin * cout * hi * wi) as u64;
        self.push(name, params, flops);
    }

    fn bn(&mut self, name: String, c: usize, (h, w): (usize, usize)) {
        self.statistics += 2 * c;
        self.push(name, 2 * c, (c * h * w) as u64);
    }

    fn elementwise(&mut self, name: String, elements: usize) {
        self.push(name, 0, elements as u64);
    }

    fn ms_block(&mut self, name: &str, cin: usize, c: usize, cfg: &ModelConfig, hw: (usize, usize)) {
        let px = hw.0 * hw.1;
        let width = if cfg.multiscale {
            self.conv(format!("{name}.branch1x1"), (cin, c), 1, 1, hw);
            self.conv(format!("{name}.branch3x3"), (cin, c), 3, 1, hw);
            self.conv(format!("{name}.branch_dilated"), (cin, c), 3, 1, hw);
            3 * c
        } else {
            self.conv(format!("{name}.branch3x3"), (cin, c), 3, 1, hw);
            c
        };
        self.bn(format!("{name}.bn_concat"), width, hw);
        self.elementwise(format!("{name}.act_concat"), width * px);
        self.conv(format!("{name}.fuse"), (width, c), 3, 1, hw);
        self.bn(format!("{name}.bn_fuse"), c, hw);
        self.elementwise(format!("{name}.act_fuse"), c * px);
    }

    fn fmam(&mut self, name: &str, c: usize, cfg: &ModelConfig, hw: (usize, usize)) {
        let px = hw.0 * hw.1;
        let levels = cfg.focal_kernels.len();
        self.conv(format!("{name}.value"), (c, c), 1, 1, hw);
        for (l, &k) in cfg.focal_kernels.iter().enumerate() {
            self.conv(format!("{name}.level{}", l + 1), (c, c), k, c, hw);
            self.elementwise(format!("{name}.level{}.act", l + 1), c * px);
        }
        self.elementwise(format!("{name}.global_pool"), c * px);
        self.conv(format!("{name}.gates"), (c, levels + 1), 1, 1, hw);
        // one product per level, then L sums
        self.elementwise(format!("{name}.gating"), (2 * (levels + 1) - 1) * c * px);
        self.conv(format!("{name}.query"), (c, c), 1, 1, hw);
        self.conv(format!("{name}.modulator"), (c, c), 1, 1, hw);
        self.elementwise(format!("{name}.modulation"), c * px);
    }

    fn raam(&mut self, name: &str, c: usize, (h, w): (usize, usize)) {
        let width = RAAM_GROUPS * RAAM_GROUP_CHANNELS;
        let px = h * w;
        self.conv(format!("{name}.conv"), (c, width), 3, 1, (h, w));
        self.bn(format!("{name}.bn"), width, (h, w));
        self.elementwise(format!("{name}.relu"), width * px);
        let p4 = (h / 4) * (w / 4);
        let p8 = (h / RAAM_STRIDE) * (w / RAAM_STRIDE);
        // max and avg cascades on m, avg cascade on the group means
        self.elementwise(format!("{name}.pools"), 2 * width * (p4 + p8) + RAAM_GROUPS * (p4 + p8));
        self.elementwise(format!("{name}.group_means"), RAAM_GROUPS * px + RAAM_GROUPS * p8 + p8);
        self.elementwise(format!("{name}.products"), width * p8 + RAAM_GROUPS * p8);
        self.elementwise(format!("{name}.apply"), c * px);
    }
}

/// Per-layer costs of `cfg` on an `h x w` input.
pub fn layer_costs(cfg: &ModelConfig, h: usize, w: usize) -> Result<Vec<LayerCost>> {
    Ok(count(cfg, h, w)?.rows)
}

fn count(cfg: &ModelConfig, h: usize, w: usize) -> Result<Counter> {
    cfg.validate()?;
    let d = cfg.required_divisor();
    if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
        return Err(Error::Indivisible {
            op: "flops_estimate",
            shape: crate::Shape::from([1, cfg.in_channels, h, w]),
            divisor: d,
        });
    }
    let mut c = Counter {
        rows: Vec::new(),
        statistics: 0,
    };
    let widths = cfg.channels;
    let res = |i: usize| (h >> i, w >> i);
    let mut cin = cfg.in_channels;
    for i in 0..3 {
        let ch = widths[i];
        c.ms_block(&format!("enc{}", i + 1), cin, ch, cfg, res(i));
        let next = if i < 2 { widths[i + 1] } else { cfg.bottleneck };
        c.conv(format!("down{}.conv", i + 1), (ch, next), 2, 1, res(i + 1));
        c.bn(format!("down{}.bn", i + 1), next, res(i + 1));
        c.elementwise(format!("down{}.act", i + 1), next * res(i + 1).0 * res(i + 1).1);
        cin = next;
    }
    if cfg.fmam_bottleneck {
        c.fmam("bottleneck.fmam", cfg.bottleneck, cfg, res(3));
    }
    for i in 0..3 {
        if cfg.fmam_skips {
            c.fmam(&format!("skip{}.fmam", i + 1), widths[i], cfg, res(i));
        }
        if cfg.has_raam(i + 1) {
            c.raam(&format!("skip{}.raam", i + 1), widths[i], res(i));
        }
    }
    let mut cin = cfg.bottleneck;
    for i in (0..3).rev() {
        let ch = widths[i];
        c.ms_block(&format!("dec{}", i + 1), cin, ch, cfg, res(i + 1));
        c.conv_transpose(format!("up{}.conv", i + 1), (ch, ch), 3, res(i + 1));
        c.bn(format!("up{}.bn", i + 1), ch, res(i));
        c.elementwise(format!("up{}.act", i + 1), ch * res(i).0 * res(i).1);
        cin = if cfg.skips { 2 * ch } else { ch };
    }
    c.ms_block("final", cin, widths[0], cfg, res(0));
    c.conv("head".into(), (widths[0], 1), 1, 1, res(0));
    c.elementwise("head.sigmoid".into(), h * w);
    Ok(c)
}

/// Parameters, statistics and FLOPs of `cfg` on an `h x w` input.
pub fn complexity(cfg: &ModelConfig, h: usize, w: usize) -> Result<Complexity> {
    let c = count(cfg, h, w)?;
    Ok(Complexity {
        params: c.rows.iter().map(|r| r.params).sum(),
        statistics: c.statistics,
        flops: c.rows.iter().map(|r| r.flops).sum(),
    })
}

/// FLOPs of one forward pass on an `h x w` input.
pub fn flops_estimate(cfg: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    Ok(complexity(cfg, h, w)?.flops)
}
