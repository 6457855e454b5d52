//! Dataset directories and PNG rasters.
//!
//! A dataset root holds `images/<stem>.png`, `masks/<stem>.png` and
//! optionally `fov/<stem>.png`. Files pair up by stem; samples are ordered by
//! stem. Images may be 8-bit gray or RGB (alpha is dropped, gray is
//! replicated to three channels). Masks and FOVs are thresholded at 128.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb};
use lfra_core::data::Sample;
use lfra_core::metrics::RgbImage;
use lfra_core::Tensor;

use crate::error::{Error, Result};

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const FOV_DIR: &str = "fov";

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// PNG files of a directory keyed by stem.
fn pngs_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if out.insert(stem.to_string(), path.clone()).is_some() {
                return Err(dataset_err(&path, "duplicate stem"));
            }
        }
    }
    Ok(out)
}

/// `3 x H x W` image in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(Error::image(path))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[3 * p + c] as f32 / 255.0
    }))
}

/// Binary `1 x H x W` mask: gray values of 128 and above are foreground.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(Error::image(path))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn([1, h, w], |i| if raw[i] >= 128 { 1.0 } else { 0.0 }))
}

/// Loads every image that has a mask. With `require_masks` off, images
/// without a mask get an all-zero one (prediction on unlabeled data).
pub fn load_dir(root: &Path, require_masks: bool) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(dataset_err(root, "dataset root does not exist"));
    }
    let images_dir = root.join(IMAGES_DIR);
    if !images_dir.is_dir() {
        return Err(dataset_err(root, "missing images/ directory"));
    }
    let images = pngs_by_stem(&images_dir)?;
    let masks_dir = root.join(MASKS_DIR);
    let masks = if masks_dir.is_dir() {
        pngs_by_stem(&masks_dir)?
    } else if require_masks {
        return Err(dataset_err(root, "missing masks/ directory"));
    } else {
        BTreeMap::new()
    };
    let fov_dir = root.join(FOV_DIR);
    let fovs = if fov_dir.is_dir() {
        pngs_by_stem(&fov_dir)?
    } else {
        BTreeMap::new()
    };
    if images.is_empty() {
        return Err(dataset_err(&images_dir, "no PNG images"));
    }
    let mut out = Vec::with_capacity(images.len());
    for (stem, path) in &images {
        let image = read_image(path)?;
        let (h, w) = (image.dims()[1], image.dims()[2]);
        let mask = match masks.get(stem) {
            Some(p) => read_mask(p)?,
            None if require_masks => return Err(dataset_err(path, "no matching mask")),
            None => Tensor::zeros([1, h, w]),
        };
        let fov = fovs.get(stem).map(|p| read_mask(p)).transpose()?;
        let sample = Sample::new(stem.clone(), image, mask, fov).map_err(|e| dataset_err(path, e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `1 x H x W` (or `H x W`) map in `[0, 1]` as 8-bit gray.
pub fn write_gray(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let d = t.dims();
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(t.data()[y as usize * w + x as usize])])
    });
    img.save(path).map_err(Error::image(path))
}

/// Writes a `3 x H x W` image in `[0, 1]` as 8-bit RGB.
pub fn write_rgb_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let d = t.dims();
    let (h, w) = (d[1], d[2]);
    let plane = h * w;
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([
            to_u8(t.data()[p]),
            to_u8(t.data()[plane + p]),
            to_u8(t.data()[2 * plane + p]),
        ])
    });
    img.save(path).map_err(Error::image(path))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, img.data.clone())
            .ok_or_else(|| dataset_err(path, "raster size mismatch"))?;
    buf.save(path).map_err(Error::image(path))
}

/// Writes samples as a dataset root (images, masks and FOVs where present).
pub fn write_dir(root: &Path, samples: &[Sample]) -> Result<()> {
    for sub in [IMAGES_DIR, MASKS_DIR, FOV_DIR] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(Error::io(&d))?;
    }
    for s in samples {
        write_rgb_tensor(&root.join(IMAGES_DIR).join(format!("{}.png", s.id)), &s.image)?;
        write_gray(&root.join(MASKS_DIR).join(format!("{}.png", s.id)), &s.mask)?;
        if let Some(f) = &s.fov {
            write_gray(&root.join(FOV_DIR).join(format!("{}.png", s.id)), f)?;
        }
    }
    Ok(())
}
