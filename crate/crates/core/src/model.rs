//! The assembled network, its configuration and ablation presets.
//!
//! Wiring, with `S*` the encoder skips and `D1` the bottleneck output:
//!
//! ```text
//! S1 = ms(I)      C1 = down(S1)      (H)
//! S2 = ms(C1)     C2 = down(S2)      (H/2)
//! S3 = ms(C2)     Cenc = down(S3)    (H/4)
//! D1 = FMAM(Cenc)                    (H/8)
//! U3 = up(ms(D1))         ++ A3(S3)  (H/4)
//! U2 = up(ms(U3))         ++ A2(S2)  (H/2)
//! U1 = up(ms(U2))         ++ A1(S1)  (H)
//! out = sigmoid(conv1x1(ms(U1)))
//! ```
//!
//! `++` is channel concatenation and `Ai` is the attention configured on
//! skip `i` (identity when none). Three upsampling stages mirror the three
//! downsampling stages so the output has the input's resolution.

pub mod complexity;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{FocalModulation, RegionAwareAttention, RAAM_STRIDE};
use crate::autodiff::{Conv2dOptions, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BlockOptions, Conv2d, DownsampleBlock, Graph, Init, MsConvBlock, ParamStore, UpsampleBlock};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Base width of the default model, tuned so the trainable parameter count
/// lands near 0.17 M.
pub const DEFAULT_BASE_WIDTH: usize = 8;

/// The ten ablation presets, from the plain lightweight U-Net to the full
/// model.
pub const ABLATION_PRESETS: [&str; 10] = [
    "LU-NS",
    "MLU-NS",
    "MLU",
    "F-Skip",
    "R-Skip",
    "R-Skip+F-Bottleneck",
    "F-Bottleneck",
    "R-13-Skip+F-Bottleneck",
    "R-23-Skip+F-Bottleneck",
    "R-12-Skip+F-Bottleneck",
];

/// Presets accepted by [`ModelConfig::preset`] besides the ablation names.
pub const EXTRA_PRESETS: [&str; 2] = ["default", "tiny"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Encoder stage widths `[c1, c2, c3]`.
    pub channels: [usize; 3],
    pub bottleneck: usize,
    /// Dilation of the dilated 3x3 branch.
    pub dilation: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    /// Depthwise kernel per focal level.
    pub focal_kernels: Vec<usize>,
    /// Skips (1-based, shallowest first) carrying region-aware attention.
    pub raam_skips: Vec<usize>,
    pub fmam_bottleneck: bool,
    /// Focal modulation on every skip (ablation only).
    pub fmam_skips: bool,
    pub skips: bool,
    pub multiscale: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_base(DEFAULT_BASE_WIDTH)
    }
}

impl ModelConfig {
    /// Full model with channel plan `[b, 2b, 4b]` and a `4b` bottleneck.
    pub fn with_base(b: usize) -> Self {
        ModelConfig {
            in_channels: 3,
            channels: [b, 2 * b, 4 * b],
            bottleneck: 4 * b,
            dilation: 2,
            dropout: 0.5,
            leaky_slope: 0.3,
            focal_kernels: vec![3, 5],
            raam_skips: vec![1, 2],
            fmam_bottleneck: true,
            fmam_skips: false,
            skips: true,
            multiscale: true,
            seed: 0,
        }
    }

    /// Looks up an ablation preset (see [`ABLATION_PRESETS`]), `default` or
    /// `tiny` (the full model at base width 2).
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        let attention = |c: &mut ModelConfig, raam: &[usize], fmam: bool| {
            c.raam_skips = raam.to_vec();
            c.fmam_bottleneck = fmam;
        };
        match name {
            "default" | "R-12-Skip+F-Bottleneck" => {}
            "tiny" => c = ModelConfig::with_base(2),
            "LU-NS" => {
                attention(&mut c, &[], false);
                c.skips = false;
                c.multiscale = false;
            }
            "MLU-NS" => {
                attention(&mut c, &[], false);
                c.skips = false;
            }
            "MLU" => attention(&mut c, &[], false),
            "F-Skip" => {
                attention(&mut c, &[], false);
                c.fmam_skips = true;
            }
            "R-Skip" => attention(&mut c, &[1, 2, 3], false),
            "R-Skip+F-Bottleneck" => attention(&mut c, &[1, 2, 3], true),
            "F-Bottleneck" => attention(&mut c, &[], true),
            "R-13-Skip+F-Bottleneck" => attention(&mut c, &[1, 3], true),
            "R-23-Skip+F-Bottleneck" => attention(&mut c, &[2, 3], true),
            _ => {
                let valid: Vec<&str> = ABLATION_PRESETS.iter().chain(&EXTRA_PRESETS).copied().collect();
                return Err(Error::UnknownPreset {
                    name: name.to_string(),
                    valid: valid.join(", "),
                });
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(Error::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.in_channels == 0 {
            return bad("in_channels", "must be positive");
        }
        if self.channels.contains(&0) {
            return bad("channels", "every stage width must be positive");
        }
        if self.bottleneck == 0 {
            return bad("bottleneck", "must be positive");
        }
        if self.dilation == 0 {
            return bad("dilation", "must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope.is_finite()) {
            return bad("leaky_slope", "must be finite and non-negative");
        }
        if self.focal_kernels.is_empty() || self.focal_kernels.iter().any(|k| k % 2 == 0) {
            return bad("focal_kernels", "needs at least one kernel, all odd");
        }
        let mut seen = [false; 3];
        for &s in &self.raam_skips {
            if !(1..=3).contains(&s) {
                return bad("raam_skips", "skip indices must lie in {1, 2, 3}");
            }
            if seen[s - 1] {
                return bad("raam_skips", "duplicate skip index");
            }
            seen[s - 1] = true;
        }
        if !self.skips && (!self.raam_skips.is_empty() || self.fmam_skips) {
            return bad("skips", "skip attention requires skip connections");
        }
        Ok(())
    }

    pub fn has_raam(&self, skip: usize) -> bool {
        self.raam_skips.contains(&skip)
    }

    /// Whether any attention module is present.
    pub fn has_attention(&self) -> bool {
        self.fmam_bottleneck || self.fmam_skips || !self.raam_skips.is_empty()
    }

    /// Spatial extents must be multiples of this.
    pub fn required_divisor(&self) -> usize {
        let mut d = 8;
        for &s in &self.raam_skips {
            d = d.max(RAAM_STRIDE << (s - 1));
        }
        d
    }

    /// `key=value` lines, one per field; parsed back by [`Self::from_kv`].
    pub fn to_kv(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        put("in_channels", self.in_channels.to_string());
        put("channels", list(&self.channels));
        put("bottleneck", self.bottleneck.to_string());
        put("dilation", self.dilation.to_string());
        put("dropout", format!("{:?}", self.dropout));
        put("leaky_slope", format!("{:?}", self.leaky_slope));
        put("focal_kernels", list(&self.focal_kernels));
        put("raam_skips", list(&self.raam_skips));
        put("fmam_bottleneck", self.fmam_bottleneck.to_string());
        put("fmam_skips", self.fmam_skips.to_string());
        put("skips", self.skips.to_string());
        put("multiscale", self.multiscale.to_string());
        put("seed", self.seed.to_string());
        out
    }

    /// Parses `key=value` lines; missing keys keep their default values,
    /// unknown keys are an error.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    /// Overrides the fields named in `key=value` lines, then validates.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        fn parse<V: core::str::FromStr>(field: &'static str, v: &str) -> Result<V> {
            v.trim().parse().map_err(|_| Error::InvalidConfig {
                field,
                reason: format!("cannot parse `{v}`"),
            })
        }
        fn list(field: &'static str, v: &str) -> Result<Vec<usize>> {
            let v = v.trim();
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| parse(field, x)).collect()
        }
        let c = self;
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::InvalidConfig {
                field: "config",
                reason: format!("line `{line}` is not key=value"),
            })?;
            match k.trim() {
                "in_channels" => c.in_channels = parse("in_channels", v)?,
                "channels" => {
                    let l = list("channels", v)?;
                    c.channels = l.as_slice().try_into().map_err(|_| Error::InvalidConfig {
                        field: "channels",
                        reason: "expected three widths".into(),
                    })?;
                }
                "bottleneck" => c.bottleneck = parse("bottleneck", v)?,
                "dilation" => c.dilation = parse("dilation", v)?,
                "dropout" => c.dropout = parse("dropout", v)?,
                "leaky_slope" => c.leaky_slope = parse("leaky_slope", v)?,
                "focal_kernels" => c.focal_kernels = list("focal_kernels", v)?,
                "raam_skips" => c.raam_skips = list("raam_skips", v)?,
                "fmam_bottleneck" => c.fmam_bottleneck = parse("fmam_bottleneck", v)?,
                "fmam_skips" => c.fmam_skips = parse("fmam_skips", v)?,
                "skips" => c.skips = parse("skips", v)?,
                "multiscale" => c.multiscale = parse("multiscale", v)?,
                "seed" => c.seed = parse("seed", v)?,
                other => {
                    return Err(Error::InvalidConfig {
                        field: "config",
                        reason: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        c.validate()
    }

    fn block_options(&self) -> BlockOptions {
        BlockOptions {
            dilation: self.dilation,
            dropout: self.dropout,
            slope: self.leaky_slope,
            multiscale: self.multiscale,
        }
    }
}

/// Encoder outputs: the three skips and the bottleneck feature `D1`.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub skips: [Var; 3],
    pub bottleneck: Var,
}

#[derive(Debug, Clone)]
pub struct LfraNet<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    encoders: Vec<MsConvBlock>,
    downs: Vec<DownsampleBlock>,
    pub bottleneck_fmam: Option<FocalModulation>,
    skip_fmam: Vec<Option<FocalModulation>>,
    skip_raam: Vec<Option<RegionAwareAttention>>,
    /// Decoder stages, deepest first.
    decoders: Vec<MsConvBlock>,
    ups: Vec<UpsampleBlock>,
    last: MsConvBlock,
    head: Conv2d,
}

impl<T: Scalar> LfraNet<T> {
    /// Builds the network with weights drawn from `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let mut params = ParamStore::new();
        let mut rng = rng::stream(cfg.seed, rng::STREAM_INIT, 0);
        let mut init = Init::new(&mut params, &mut rng);
        let o = cfg.block_options();
        let slope = cfg.leaky_slope;
        let [c1, c2, c3] = cfg.channels;
        let widths = [c1, c2, c3];

        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &c) in widths.iter().enumerate() {
            encoders.push(MsConvBlock::new(&mut init, &format!("enc{}", i + 1), cin, c, o)?);
            let next = if i < 2 { widths[i + 1] } else { cfg.bottleneck };
            downs.push(DownsampleBlock::new(
                &mut init,
                &format!("down{}", i + 1),
                c,
                next,
                slope,
            )?);
            cin = next;
        }
        let bottleneck_fmam = if cfg.fmam_bottleneck {
            Some(FocalModulation::new(
                &mut init,
                "bottleneck.fmam",
                cfg.bottleneck,
                &cfg.focal_kernels,
                slope,
            )?)
        } else {
            None
        };
        let mut skip_fmam = Vec::new();
        let mut skip_raam = Vec::new();
        for (i, &c) in widths.iter().enumerate() {
            let fm = if cfg.fmam_skips {
                Some(FocalModulation::new(
                    &mut init,
                    &format!("skip{}.fmam", i + 1),
                    c,
                    &cfg.focal_kernels,
                    slope,
                )?)
            } else {
                None
            };
            let ra = if cfg.has_raam(i + 1) {
                Some(RegionAwareAttention::new(&mut init, &format!("skip{}.raam", i + 1), c)?)
            } else {
                None
            };
            skip_fmam.push(fm);
            skip_raam.push(ra);
        }

        let mut decoders = Vec::new();
        let mut ups = Vec::new();
        let mut cin = cfg.bottleneck;
        for i in (0..3).rev() {
            let c = widths[i];
            decoders.push(MsConvBlock::new(&mut init, &format!("dec{}", i + 1), cin, c, o)?);
            ups.push(UpsampleBlock::new(&mut init, &format!("up{}", i + 1), c, c, slope)?);
            cin = if cfg.skips { 2 * c } else { c };
        }
        let last = MsConvBlock::new(&mut init, "final", cin, c1, o)?;
        let head = Conv2d::new(&mut init, "head", (c1, 1), 1, Conv2dOptions::default(), true)?;
        drop(init);
        Ok(LfraNet {
            config: cfg,
            params,
            encoders,
            downs,
            bottleneck_fmam,
            skip_fmam,
            skip_raam,
            decoders,
            ups,
            last,
            head,
        })
    }

    /// Trainable scalar count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn check_input(&self, g: &Graph<'_, T>, x: Var) -> Result<()> {
        let (_, c, h, w) = g.tape.value(x).expect_nchw("lfra_net")?;
        if c != self.config.in_channels {
            return Err(Error::ChannelMismatch {
                op: "lfra_net",
                expected: self.config.in_channels,
                found: c,
            });
        }
        let d = self.config.required_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::Indivisible {
                op: "lfra_net",
                shape: g.tape.shape(x).clone(),
                divisor: d,
            });
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Encoded> {
        self.check_input(g, x)?;
        let mut skips = [x; 3];
        let mut h = x;
        for i in 0..3 {
            skips[i] = self.encoders[i].forward(g, h)?;
            h = self.downs[i].forward(g, skips[i])?;
        }
        let bottleneck = match &self.bottleneck_fmam {
            Some(f) => f.forward(g, h)?,
            None => h,
        };
        Ok(Encoded { skips, bottleneck })
    }

    /// Probability map `N x 1 x H x W` of an encoded batch.
    pub fn decode(&self, g: &mut Graph<'_, T>, enc: &Encoded) -> Result<Var> {
        let mut h = enc.bottleneck;
        for (stage, (dec, up)) in self.decoders.iter().zip(&self.ups).enumerate() {
            let skip_index = 2 - stage;
            let d = dec.forward(g, h)?;
            h = up.forward(g, d)?;
            if self.config.skips {
                let mut s = enc.skips[skip_index];
                if let Some(f) = &self.skip_fmam[skip_index] {
                    s = f.forward(g, s)?;
                }
                if let Some(r) = &self.skip_raam[skip_index] {
                    s = r.forward(g, s)?;
                }
                h = g.tape.concat_channels(&[h, s])?;
            }
        }
        let f = self.last.forward(g, h)?;
        let logits = self.head.forward(g, f)?;
        Ok(g.tape.sigmoid(logits))
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let enc = self.encode(g, x)?;
        self.decode(g, &enc)
    }

    /// Infer-mode probabilities for a batch `N x C x H x W`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let mut g = Graph::new(&mut tape, &self.params, Mode::Infer, rng::stream(0, 0, 0));
        let y = self.forward(&mut g, x)?;
        drop(g);
        Ok(tape.value(y).clone())
    }

    /// Copies every stored tensor from `other`, which must have the same
    /// names and shapes.
    pub fn load_params(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Data(format!(
                "parameter count mismatch: expected {}, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (id, p) in other.iter() {
            let mine = self.params.get(id);
            if mine.name != p.name || mine.value.shape() != p.value.shape() || mine.kind != p.kind {
                return Err(Error::Data(format!(
                    "parameter `{}` does not match `{}`",
                    p.name, mine.name
                )));
            }
        }
        for (id, p) in other.iter() {
            *self.params.value_mut(id) = p.value.clone();
        }
        Ok(())
    }
}
