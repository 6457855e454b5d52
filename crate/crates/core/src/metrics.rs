//! Thresholding, confusion counts, segmentation metrics and overlays.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::LfraNet;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `1` where `pred >= threshold`, else `0`.
pub fn binarize<T: Scalar>(pred: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let t = T::from_f64(threshold);
    pred.map(|v| if v >= t { T::ONE } else { T::ZERO })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

/// Counts over every pixel, or over pixels where `fov` is set. Values above
/// one half count as positive.
pub fn confusion_counts<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    fov: Option<&Tensor<T>>,
) -> Result<ConfusionCounts> {
    let mismatch = |rhs: &Tensor<T>| Error::ShapeMismatch {
        op: "confusion_counts",
        lhs: pred.shape().clone(),
        rhs: rhs.shape().clone(),
    };
    if pred.numel() != gt.numel() {
        return Err(mismatch(gt));
    }
    if let Some(f) = fov {
        if f.numel() != pred.numel() {
            return Err(mismatch(f));
        }
    }
    let half = T::from_f64(0.5);
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if let Some(f) = fov {
            if f.data()[i] <= half {
                continue;
            }
        }
        match (p > half, g > half) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub dice: f64,
    pub jaccard: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Some ratio was 0/0 and reported as 1.0.
    pub degenerate: bool,
}

/// Dice, Jaccard, accuracy, sensitivity and specificity of one counts
/// object. Any 0/0 ratio is 1.0 and sets `degenerate`.
pub fn segmentation_metrics(c: &ConfusionCounts) -> Metrics {
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let jaccard = ratio(c.tp, c.tp + c.fp + c.fn_);
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let specificity = ratio(c.tn, c.tn + c.fp);
    let accuracy = ratio(c.tp + c.tn, c.total());
    Metrics {
        dice,
        jaccard,
        accuracy,
        sensitivity,
        specificity,
        degenerate,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    /// Unweighted mean of the per-image metrics (the headline numbers).
    pub mean: Metrics,
    /// Counts summed over every image.
    pub pooled_counts: ConfusionCounts,
    /// Metrics of the pooled counts.
    pub pooled: Metrics,
}

impl MetricsReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Data("cannot aggregate metrics over zero images".into()));
        }
        let n = per_image.len() as f64;
        let mean_of = |f: fn(&Metrics) -> f64| per_image.iter().map(|m| f(&m.metrics)).sum::<f64>() / n;
        let mean = Metrics {
            dice: mean_of(|m| m.dice),
            jaccard: mean_of(|m| m.jaccard),
            accuracy: mean_of(|m| m.accuracy),
            sensitivity: mean_of(|m| m.sensitivity),
            specificity: mean_of(|m| m.specificity),
            degenerate: per_image.iter().any(|m| m.metrics.degenerate),
        };
        let pooled_counts = per_image
            .iter()
            .fold(ConfusionCounts::default(), |a, m| a.merge(&m.counts));
        Ok(MetricsReport {
            mean,
            pooled: segmentation_metrics(&pooled_counts),
            pooled_counts,
            per_image,
        })
    }
}

/// Per-image metrics of `net` on `samples`, then their mean.
pub fn evaluate_dataset<T: Scalar>(
    net: &LfraNet<T>,
    samples: &[Sample],
    threshold: f64,
    fov_only: bool,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = predict_sample(net, s)?;
        let bin = binarize(&pred, threshold);
        let mask: Tensor<T> = s.mask.cast();
        let fov: Option<Tensor<T>> = if fov_only {
            s.fov.as_ref().map(|f| f.cast())
        } else {
            None
        };
        let counts = confusion_counts(&bin, &mask, fov.as_ref())?;
        rows.push(ImageMetrics {
            id: s.id.clone(),
            counts,
            metrics: segmentation_metrics(&counts),
        });
    }
    MetricsReport::from_images(rows)
}

/// Probability map `1 x H x W` for one sample.
pub fn predict_sample<T: Scalar>(net: &LfraNet<T>, s: &Sample) -> Result<Tensor<T>> {
    let x = Tensor::stack(&[&s.image.cast::<T>()])?;
    let (_, _, h, w) = x.nchw().expect("stacked sample");
    net.predict(&x)?.reshape([1, h, w])
}

/// 8-bit RGB raster, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

pub const TP_COLOR: [u8; 3] = [0, 255, 0];
pub const FP_COLOR: [u8; 3] = [0, 0, 255];
pub const FN_COLOR: [u8; 3] = [255, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlayStyle {
    /// Green true positives, blue false positives, red false negatives.
    #[default]
    Extended,
    /// As `Extended` but false negatives show the base image.
    Strict,
}

/// Colors `pred` against `gt` on top of `base` (`3 x H x W` or
/// `1 x H x W`, values in `[0, 1]`). True negatives show the base image.
pub fn overlay_render<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    base: &Tensor<f32>,
    style: OverlayStyle,
) -> Result<RgbImage> {
    let dims = base.dims();
    let (bc, h, w) = match dims {
        [c, h, w] | [1, c, h, w] if *c == 1 || *c == 3 => (*c, *h, *w),
        _ => return Err(Error::invalid("overlay_render", "base must be 1xHxW or 3xHxW")),
    };
    for t in [pred.numel(), gt.numel()] {
        if t != h * w {
            return Err(Error::ShapeMismatch {
                op: "overlay_render",
                lhs: base.shape().clone(),
                rhs: if pred.numel() != h * w {
                    pred.shape().clone()
                } else {
                    gt.shape().clone()
                },
            });
        }
    }
    let half = T::from_f64(0.5);
    let plane = h * w;
    let mut data = vec![0u8; 3 * plane];
    let b = base.data();
    for i in 0..plane {
        let p = pred.data()[i] > half;
        let g = gt.data()[i] > half;
        let color = match (p, g) {
            (true, true) => Some(TP_COLOR),
            (true, false) => Some(FP_COLOR),
            (false, true) if style == OverlayStyle::Extended => Some(FN_COLOR),
            _ => None,
        };
        let px = color.unwrap_or_else(|| {
            let ch = |c: usize| {
                let v = b[if bc == 3 { c * plane + i } else { i }];
                (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
            };
            [ch(0), ch(1), ch(2)]
        });
        data[3 * i..3 * i + 3].copy_from_slice(&px);
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}
