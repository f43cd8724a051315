//! Crop, resize and intensity normalisation.

use crate::error::{PadmError, Result};
use crate::image::Image;

/// Centre crop to `roi × roi`.
pub fn center_crop(img: &Image, roi: usize) -> Result<Image> {
    let side = img.side();
    if roi == 0 || roi > side {
        return Err(PadmError::Shape(format!("roi {roi} does not fit a {side}-pixel image")));
    }
    let start = (side - roi) / 2;
    let data = (0..roi)
        .flat_map(|r| (0..roi).map(move |c| (r, c)))
        .map(|(r, c)| img.get(start + r, start + c))
        .collect();
    Image::new(roi, img.spacing(), data)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Image, target: usize) -> Result<Image> {
    let side = img.side();
    if target == 0 {
        return Err(PadmError::Shape("target size must be positive".into()));
    }
    if target == side {
        return Ok(img.clone());
    }
    let scale = side as f64 / target as f64;
    let coord = |i: usize| {
        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, side as f64 - 1.0);
        let i0 = (s.floor() as usize).min(side - 1);
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut data = Vec::with_capacity(target * target);
    for r in 0..target {
        let (r0, r1, fr) = coord(r);
        for c in 0..target {
            let (c0, c1, fc) = coord(c);
            let top = (1.0 - fc) * img.get(r0, c0) + fc * img.get(r0, c1);
            let bottom = (1.0 - fc) * img.get(r1, c0) + fc * img.get(r1, c1);
            data.push((1.0 - fr) * top + fr * bottom);
        }
    }
    Image::new(target, img.spacing() * scale, data)
}

/// `v ↦ 2v/vmax − 1`.
pub fn normalize(img: &Image, vmax: f64) -> Result<Image> {
    if !(vmax > 0.0 && vmax.is_finite()) {
        return Err(PadmError::InvalidConfig(format!("normalisation max {vmax}")));
    }
    let data = img.data().iter().map(|v| 2.0 * v / vmax - 1.0).collect();
    Image::new(img.side(), img.spacing(), data)
}

/// Inverse of [`normalize`].
pub fn denormalize(values: &[f64], vmax: f64) -> Vec<f64> {
    values.iter().map(|v| (v + 1.0) * vmax / 2.0).collect()
}

pub fn preprocess(img: &Image, roi: usize, target: usize, vmax: f64) -> Result<Image> {
    normalize(&resize_bilinear(&center_crop(img, roi)?, target)?, vmax)
}
