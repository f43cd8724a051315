//! Image-quality metrics on square images.

use serde::{Deserialize, Serialize};

use crate::error::{PadmError, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of images normalised to `[-1, 1]`.
pub const NORMALIZED_RANGE: f64 = 2.0;

fn check(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(PadmError::Shape(format!(
            "metric inputs have {} and {} values",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    mse(a, b).map(f64::sqrt)
}

/// `10·log10(range² / MSE)`; `+∞` when the images are identical.
pub fn psnr(a: &[f64], b: &[f64], data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(PadmError::InvalidConfig("data_range must be positive".into()));
    }
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / m).log10()
    })
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM over every window position fully inside a `side × side` image,
/// using an 11×11 Gaussian window (σ = 1.5). Images smaller than the window
/// use the largest odd window that fits.
pub fn ssim(a: &[f64], b: &[f64], side: usize, data_range: f64) -> Result<f64> {
    check(a, b)?;
    if side * side != a.len() {
        return Err(PadmError::Shape(format!("{} values are not {side}×{side}", a.len())));
    }
    let size = SSIM_WINDOW.min(if side % 2 == 1 { side } else { side - 1 });
    let w = gaussian_window(size);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let positions = side - size + 1;
    let mut total = 0.0;
    for r0 in 0..positions {
        for c0 in 0..positions {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, wi) in w.iter().enumerate() {
                for (j, wj) in w.iter().enumerate() {
                    let k = (r0 + i) * side + c0 + j;
                    let wt = wi * wj;
                    let (x, y) = (a[k], b[k]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (positions * positions) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub rmse: f64,
    pub ssim: f64,
    pub psnr: f64,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, pred: &[f64], gt: &[f64], side: usize) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            rmse: rmse(pred, gt)?,
            ssim: ssim(pred, gt, side, NORMALIZED_RANGE)?,
            psnr: psnr(pred, gt, NORMALIZED_RANGE)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub rmse: f64,
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub resolution: usize,
    pub count: usize,
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn new(
        label: impl Into<String>,
        resolution: usize,
        per_image: Vec<ImageMetrics>,
        config: serde_json::Value,
    ) -> Self {
        let n = per_image.len().max(1) as f64;
        let aggregate = Aggregate {
            rmse: per_image.iter().map(|m| m.rmse).sum::<f64>() / n,
            ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / n,
            psnr: per_image.iter().map(|m| m.psnr).sum::<f64>() / n,
        };
        Self {
            label: label.into(),
            resolution,
            count: per_image.len(),
            per_image,
            aggregate,
            config,
        }
    }

    /// Appends one row per image plus a `mean` row, columns
    /// `label,id,rmse,ssim,psnr`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for m in &self.per_image {
            w.write_record([
                self.label.as_str(),
                &m.id,
                &m.rmse.to_string(),
                &m.ssim.to_string(),
                &m.psnr.to_string(),
            ])?;
        }
        let a = &self.aggregate;
        w.write_record([
            self.label.as_str(),
            "mean",
            &a.rmse.to_string(),
            &a.ssim.to_string(),
            &a.psnr.to_string(),
        ])?;
        Ok(())
    }

    pub const CSV_HEADER: [&'static str; 5] = ["label", "id", "rmse", "ssim", "psnr"];
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_scalar_case() {
        let a = vec![0.1; 4];
        let b = vec![0.0; 4];
        let p = psnr(&a, &b, 2.0).unwrap();
        assert!((p - 26.020_599_913_279_625).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 2.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn small_images_shrink_the_window() {
        let a: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        assert!((ssim(&a, &a, 4, 2.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let w = gaussian_window(11);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w[0], w[10]);
        assert!(w[5] > w[4]);
    }
}
