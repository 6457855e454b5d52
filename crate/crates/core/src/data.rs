//! Samples, resizing, augmentation, splitting and a synthetic vessel
//! generator.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// One dataset record. `image` is `3 x H x W` in `[0, 1]`; `mask` and
/// `fov` are binary `1 x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub fov: Option<Tensor<f32>>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>, fov: Option<Tensor<f32>>) -> Result<Self> {
        let s = Sample {
            id: id.into(),
            image,
            mask,
            fov,
        };
        s.validate()?;
        Ok(s)
    }

    /// `(height, width)`.
    pub fn extents(&self) -> (usize, usize) {
        let d = self.image.dims();
        (d[1], d[2])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Data(format!("sample `{}`: {what}", self.id)));
        let d = self.image.dims();
        if d.len() != 3 || d[0] != 3 {
            return bad("image must be 3xHxW");
        }
        if !self.image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return bad("image values must be finite and in [0, 1]");
        }
        let binary = |t: &Tensor<f32>| t.dims() == [1, d[1], d[2]] && t.data().iter().all(|&v| v == 0.0 || v == 1.0);
        if !binary(&self.mask) {
            return bad("mask must be a binary 1xHxW tensor matching the image");
        }
        if let Some(f) = &self.fov {
            if !binary(f) {
                return bad("fov must be a binary 1xHxW tensor matching the image");
            }
        }
        Ok(())
    }
}

/// Published split and augmentation target of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub name: String,
    pub train_count: usize,
    pub test_count: usize,
    /// `(width, height)` of the original images.
    pub native: (usize, usize),
    pub target_size: usize,
    /// Training images after augmentation; `None` disables augmentation.
    pub augmented: Option<usize>,
}

impl DatasetSpec {
    pub fn drive() -> Self {
        Self::known("drive", 20, 20, (565, 584), 1080)
    }

    pub fn stare() -> Self {
        Self::known("stare", 16, 4, (700, 605), 1024)
    }

    pub fn chase() -> Self {
        Self::known("chase", 20, 8, (1024, 1024), 1080)
    }

    fn known(name: &str, train: usize, test: usize, native: (usize, usize), augmented: usize) -> Self {
        DatasetSpec {
            name: name.into(),
            train_count: train,
            test_count: test,
            native,
            target_size: 512,
            augmented: Some(augmented),
        }
    }

    /// A dataset of unknown geometry: no augmentation, 512 target.
    pub fn custom() -> Self {
        DatasetSpec {
            name: "custom".into(),
            train_count: 0,
            test_count: 0,
            native: (0, 0),
            target_size: 512,
            augmented: None,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "drive" => Ok(Self::drive()),
            "stare" => Ok(Self::stare()),
            "chase" | "chase_db" | "chasedb" => Ok(Self::chase()),
            "custom" => Ok(Self::custom()),
            _ => Err(Error::Data(format!(
                "unknown dataset `{name}` (expected drive, stare, chase or custom)"
            ))),
        }
    }
}

// ---------------------------------------------------------------- resizing

/// Bilinear resize of a `C x H x W` tensor with half-pixel centers and
/// edge clamping.
pub fn resize_bilinear(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let d = t.dims();
    let (c, h, w) = (d[0], d[1], d[2]);
    if (h, w) == (out_h, out_w) {
        return t.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = libm::floor(src) as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let src = t.data();
    Tensor::from_fn([c, out_h, out_w], |i| {
        let ch = i / (out_h * out_w);
        let (y0, y1, fy) = ys[(i / out_w) % out_h];
        let (x0, x1, fx) = xs[i % out_w];
        let p = &src[ch * h * w..];
        let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
        let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Nearest-neighbour resize of a `C x H x W` tensor (half-pixel centers).
pub fn resize_nearest(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let d = t.dims();
    let (c, h, w) = (d[0], d[1], d[2]);
    let near = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let src = t.data();
    Tensor::from_fn([c, out_h, out_w], |i| {
        let ch = i / (out_h * out_w);
        let y = near((i / out_w) % out_h, out_h, h);
        let x = near(i % out_w, out_w, w);
        src[(ch * h + y) * w + x]
    })
}

/// Resizes to `target x target`: bilinear for the image (clamped to
/// `[0, 1]`), nearest for the mask and FOV.
pub fn preprocess(s: &Sample, target: usize) -> Sample {
    let image = resize_bilinear(&s.image, target, target).map(|v| v.clamp(0.0, 1.0));
    Sample {
        id: s.id.clone(),
        image,
        mask: resize_nearest(&s.mask, target, target),
        fov: s.fov.as_ref().map(|f| resize_nearest(f, target, target)),
    }
}

// ------------------------------------------------------------ augmentation

pub const ROTATION_DEGREES: f64 = 20.0;
pub const CONTRAST_RANGE: (f64, f64) = (0.8, 1.2);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augmentation {
    Rotate { degrees: f64 },
    Contrast { factor: f64 },
    Both { degrees: f64, factor: f64 },
}

/// Source index and transform for augmented sample `a` (counted from 0
/// after the originals). Sources cycle through the inputs; the transform
/// kind advances every full cycle (rotate, contrast, both). The rotation
/// sign and contrast factor come from a stream keyed by `a` alone.
pub fn augmentation_for(a: usize, n: usize, seed: u64) -> (usize, Augmentation) {
    let mut r = rng::stream(seed, rng::STREAM_AUGMENT, a as u64);
    let degrees = if r.gen::<bool>() {
        ROTATION_DEGREES
    } else {
        -ROTATION_DEGREES
    };
    let factor = r.gen_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1);
    let aug = match (a / n) % 3 {
        0 => Augmentation::Rotate { degrees },
        1 => Augmentation::Contrast { factor },
        _ => Augmentation::Both { degrees, factor },
    };
    (a % n, aug)
}

pub fn apply_augmentation(s: &Sample, aug: Augmentation, id: String) -> Sample {
    let mut out = match aug {
        Augmentation::Rotate { degrees } => rotate(s, degrees),
        Augmentation::Contrast { factor } => adjust_contrast(s, factor),
        Augmentation::Both { degrees, factor } => adjust_contrast(&rotate(s, degrees), factor),
    };
    out.id = id;
    out
}

/// Originals first, then augmented copies until `target` samples exist.
pub fn augment(samples: &[Sample], target: usize, seed: u64) -> Result<Vec<Sample>> {
    let n = samples.len();
    if target < n {
        return Err(Error::Data(format!(
            "augmentation target {target} is below the {n} input samples"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut out = samples.to_vec();
    for a in 0..target - n {
        let (src, aug) = augmentation_for(a, n, seed);
        let id = format!("{}_aug{:04}", samples[src].id, a);
        out.push(apply_augmentation(&samples[src], aug, id));
    }
    Ok(out)
}

/// Rotates a `C x H x W` tensor about its center by `degrees`
/// (counterclockwise), filling uncovered pixels with 0.
pub fn rotate_tensor(t: &Tensor<f32>, degrees: f64, bilinear: bool) -> Tensor<f32> {
    let d = t.dims();
    let (c, h, w) = (d[0], d[1], d[2]);
    let (sin, cos) = libm::sincos(degrees.to_radians());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = t.data();
    Tensor::from_fn([c, h, w], |i| {
        let ch = i / (h * w);
        let (y, x) = (((i / w) % h) as f64 - cy, (i % w) as f64 - cx);
        // inverse mapping: rotate the output coordinate back
        let sx = cos * x - sin * y + cx;
        let sy = sin * x + cos * y + cy;
        let p = &src[ch * h * w..(ch + 1) * h * w];
        let at = |yy: isize, xx: isize| -> f32 {
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                0.0
            } else {
                p[yy as usize * w + xx as usize]
            }
        };
        if bilinear {
            let (y0, x0) = (libm::floor(sy), libm::floor(sx));
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            top * (1.0 - fy) + bottom * fy
        } else {
            at(libm::round(sy) as isize, libm::round(sx) as isize)
        }
    })
}

/// Rotates image (bilinear), mask and FOV (nearest).
pub fn rotate(s: &Sample, degrees: f64) -> Sample {
    Sample {
        id: s.id.clone(),
        image: rotate_tensor(&s.image, degrees, true).map(|v| v.clamp(0.0, 1.0)),
        mask: rotate_tensor(&s.mask, degrees, false),
        fov: s.fov.as_ref().map(|f| rotate_tensor(f, degrees, false)),
    }
}

/// Scales each image channel about its mean by `factor`, clamped to
/// `[0, 1]`. Mask and FOV are untouched.
pub fn adjust_contrast(s: &Sample, factor: f64) -> Sample {
    let d = s.image.dims();
    let plane = d[1] * d[2];
    let means: Vec<f64> = s
        .image
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
        .collect();
    let src = s.image.data();
    let image = Tensor::from_fn(d, |i| {
        let m = means[i / plane];
        ((src[i] as f64 - m) * factor + m).clamp(0.0, 1.0) as f32
    });
    Sample {
        id: s.id.clone(),
        image,
        mask: s.mask.clone(),
        fov: s.fov.clone(),
    }
}

// --------------------------------------------------------------- splitting

pub const TRAIN_FRACTION: f64 = 0.8;

/// Seeded shuffle, then the first `round(fraction * n)` (at least one, at
/// most `n - 1`) samples train and the rest validate.
pub fn split_train_val(samples: &[Sample], fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 samples to split, got {n}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Data(format!("train fraction {fraction} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::STREAM_SPLIT, 0));
    let n_train = (libm::round(fraction * n as f64) as usize).clamp(1, n - 1);
    let train = order[..n_train].iter().map(|&i| samples[i].clone()).collect();
    let val = order[n_train..].iter().map(|&i| samples[i].clone()).collect();
    Ok((train, val))
}

// --------------------------------------------------------------- synthetic

/// A fundus-like synthetic sample: dark branching curves on a reddish,
/// vignetted disc, with a circular FOV. Deterministic in `seed`.
pub fn synthetic_vessel_sample(id: impl Into<String>, size: usize, seed: u64) -> Sample {
    let mut r = rng::stream(seed, rng::STREAM_SYNTHETIC, 0);
    let s = size as f64;
    let mut mask = alloc::vec![0f32; size * size];
    let width_scale = (s / 128.0).max(1.0);
    let curves = 5 + size / 32;
    for _ in 0..curves {
        // a wavy polyline from a point near the center towards the border
        let (mut x, mut y) = (s * r.gen_range(0.35..0.65), s * r.gen_range(0.35..0.65));
        let mut heading = r.gen_range(0.0..core::f64::consts::TAU);
        let half_width = r.gen_range(1.2..2.4) * width_scale;
        let steps = 2 * size / 3;
        for _ in 0..steps {
            heading += r.gen_range(-0.12..0.12);
            let (dy, dx) = libm::sincos(heading);
            let (nx, ny) = (x + dx, y + dy);
            stamp(&mut mask, size, nx, ny, half_width);
            x = nx;
            y = ny;
            if x < 0.0 || y < 0.0 || x >= s || y >= s {
                break;
            }
        }
    }
    let (c, radius) = ((s - 1.0) / 2.0, 0.48 * s);
    let mut fov = alloc::vec![0f32; size * size];
    let mut image = alloc::vec![0f32; 3 * size * size];
    let base = [0.78f64, 0.36, 0.18];
    let plane = size * size;
    for i in 0..plane {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        let rr = libm::sqrt((x - c) * (x - c) + (y - c) * (y - c)) / radius;
        let inside = rr <= 1.0;
        fov[i] = if inside { 1.0 } else { 0.0 };
        if !inside {
            mask[i] = 0.0;
        }
        let vignette = if inside { 1.0 - 0.35 * rr * rr } else { 0.05 };
        let vessel = if mask[i] > 0.0 { 0.45 } else { 1.0 };
        for ch in 0..3 {
            let noise = r.gen_range(-0.03..0.03);
            image[ch * plane + i] = (base[ch] * vignette * vessel + noise).clamp(0.0, 1.0) as f32;
        }
    }
    Sample {
        id: id.into(),
        image: Tensor::from_fn([3, size, size], |i| image[i]),
        mask: Tensor::from_fn([1, size, size], |i| mask[i]),
        fov: Some(Tensor::from_fn([1, size, size], |i| fov[i])),
    }
}

fn stamp(mask: &mut [f32], size: usize, cx: f64, cy: f64, r: f64) {
    let lo = |v: f64| libm::floor(v - r).max(0.0) as usize;
    let hi = |v: f64| (libm::ceil(v + r) as isize).clamp(0, size as isize - 1) as usize;
    if cx + r < 0.0 || cy + r < 0.0 {
        return;
    }
    for y in lo(cy)..=hi(cy) {
        for x in lo(cx)..=hi(cx) {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r * r {
                mask[y * size + x] = 1.0;
            }
        }
    }
}

#[cfg(test)]
mod tests;
