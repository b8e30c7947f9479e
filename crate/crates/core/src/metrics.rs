//! PSNR and SSIM for images with values in `[0, 1]`.

use crate::error::{CoreError, Result};
use crate::image::ImageRGB;

/// Returned for identical images instead of infinity.
pub const PSNR_SENTINEL_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    a.check_same_size(b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

/// `10·log10(1 / MSE)` with peak value 1.
pub fn psnr(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_SENTINEL_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_SENTINEL_DB)
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Gaussian-weighted mean over every valid (fully inside) window position.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let aa = filter_valid(&prod(a, a), w, h, &k);
    let bb = filter_valid(&prod(b, b), w, h, &k);
    let ab = filter_valid(&prod(a, b), w, h, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Mean SSIM over all 11×11 Gaussian windows (σ = 1.5) that fit inside the
/// image, averaged over the three channels.
pub fn ssim(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    a.check_same_size(b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(CoreError::Config(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    if a == b {
        return Ok(1.0);
    }
    let to64 = |img: &ImageRGB, c: usize| img.plane(c).into_iter().map(f64::from).collect::<Vec<_>>();
    let s: f64 = (0..3).map(|c| ssim_plane(&to64(a, c), &to64(b, c), w, h)).sum();
    Ok(s / 3.0)
}

/// Aggregate and per-image quality.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub per_image: Vec<ImageQuality>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageQuality {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl QualityReport {
    pub fn from_images(per_image: Vec<ImageQuality>) -> Self {
        let n = per_image.len().max(1) as f64;
        Self {
            psnr_db: per_image.iter().map(|q| q.psnr_db).sum::<f64>() / n,
            ssim: per_image.iter().map(|q| q.ssim).sum::<f64>() / n,
            per_image,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim\n");
        for q in &self.per_image {
            out.push_str(&format!("{},{:.6},{:.6}\n", q.id, q.psnr_db, q.ssim));
        }
        out.push_str(&format!("mean,{:.6},{:.6}\n", self.psnr_db, self.ssim));
        out
    }
}
