//! Atmospheric scattering synthesis, transmission generation and bicubic
//! resampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::image::{ImageRGB, TransmissionMap};

fn check_pair(img: &ImageRGB, t: &TransmissionMap, a: f32) -> Result<()> {
    if (img.width(), img.height()) != (t.width(), t.height()) {
        return Err(CoreError::Domain(format!(
            "image is {}×{} but transmission map is {}×{}",
            img.height(),
            img.width(),
            t.height(),
            t.width()
        )));
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(CoreError::Domain(format!("atmospheric light {a} outside [0, 1]")));
    }
    if let Some(v) = t.values().iter().find(|v| **v <= 0.0) {
        return Err(CoreError::Domain(format!("transmission {v} must be positive")));
    }
    Ok(())
}

/// `I = J·t + A·(1 − t)` per pixel and channel, clamped to `[0, 1]`.
pub fn synthesize_haze(clear: &ImageRGB, t: &TransmissionMap, a: f32) -> Result<ImageRGB> {
    check_pair(clear, t, a)?;
    let tv = t.values();
    let pixels = clear
        .pixels()
        .chunks_exact(3)
        .zip(tv)
        .flat_map(|(px, &t)| px.iter().map(move |&j| (j * t + a * (1.0 - t)).clamp(0.0, 1.0)).collect::<Vec<_>>())
        .collect();
    ImageRGB::new(clear.width(), clear.height(), pixels)
}

/// Analytic inverse `J = (I − A·(1 − t)) / t`, clamped to `[0, 1]`.
pub fn invert_haze(hazy: &ImageRGB, t: &TransmissionMap, a: f32) -> Result<ImageRGB> {
    check_pair(hazy, t, a)?;
    let tv = t.values();
    let pixels = hazy
        .pixels()
        .chunks_exact(3)
        .zip(tv)
        .flat_map(|(px, &t)| px.iter().map(move |&i| ((i - a * (1.0 - t)) / t).clamp(0.0, 1.0)).collect::<Vec<_>>())
        .collect();
    ImageRGB::new(hazy.width(), hazy.height(), pixels)
}

/// `t = exp(−β·d)` for a depth field `d` in `[0, 1]`.
pub fn transmission_from_depth(width: usize, height: usize, depth: &[f32], beta: f32) -> Result<TransmissionMap> {
    if !(beta > 0.0) {
        return Err(CoreError::Domain(format!("beta must be positive, got {beta}")));
    }
    let values = depth
        .iter()
        .map(|&d| (-beta * d).exp().max(f32::MIN_POSITIVE))
        .collect();
    TransmissionMap::new(width, height, values)
}

/// Smooth pseudo-depth: uniform noise blurred with a Gaussian of
/// `σ = min(H, W) / 8`, min-max normalised to `[0, 1]`.
pub fn pseudo_depth(width: usize, height: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f32> = (0..width * height).map(|_| rng.random::<f32>()).collect();
    let sigma = width.min(height) as f32 / 8.0;
    let mut d = gaussian_blur(&noise, width, height, sigma);
    let (lo, hi) = d
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in &mut d {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
    d
}

pub fn generate_transmission(width: usize, height: usize, beta: f32, seed: u64) -> Result<TransmissionMap> {
    transmission_from_depth(width, height, &pseudo_depth(width, height, seed), beta)
}

fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected edges.
pub fn gaussian_blur(plane: &[f32], width: usize, height: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let taps: Vec<(i64, f32)> = (-radius..=radius).zip(kernel.iter().map(|k| k / norm)).collect();
    let resample = |src: &[f32], n: usize, stride: usize, lines: usize, line_stride: usize| {
        let mut out = vec![0.0; src.len()];
        for l in 0..lines {
            for i in 0..n {
                out[l * line_stride + i * stride] = taps
                    .iter()
                    .map(|&(o, k)| k * src[l * line_stride + reflect(i as i64 + o, n) * stride])
                    .sum();
            }
        }
        out
    };
    let rows = resample(plane, width, 1, height, width);
    resample(&rows, height, width, width, 1)
}

/// Cubic convolution kernel (`a = −0.5`).
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Normalised taps `(source index, weight)` for each output position along
/// one axis. When shrinking, the kernel is stretched by the scale factor so
/// it also acts as an anti-aliasing filter.
fn axis_taps(n: usize, m: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = n as f64 / m as f64;
    let support = scale.max(1.0);
    (0..m)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - 2.0 * support).floor() as i64;
            let hi = (center + 2.0 * support).ceil() as i64;
            let raw: Vec<(usize, f64)> = (lo..=hi)
                .map(|i| (reflect(i, n), cubic((i as f64 - center) / support)))
                .filter(|(_, w)| *w != 0.0)
                .collect();
            let total: f64 = raw.iter().map(|(_, w)| w).sum();
            raw.into_iter().map(|(i, w)| (i, (w / total) as f32)).collect()
        })
        .collect()
}

/// Bicubic resize of one `h × w` plane to `oh × ow`, unclamped.
pub fn resize_plane(plane: &[f32], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f32> {
    let xt = axis_taps(w, ow);
    let yt = axis_taps(h, oh);
    let mut rows = vec![0.0f32; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for (x, taps) in xt.iter().enumerate() {
            rows[y * ow + x] = taps.iter().map(|&(i, k)| k * src[i]).sum();
        }
    }
    let mut out = vec![0.0f32; oh * ow];
    for (y, taps) in yt.iter().enumerate() {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().map(|&(i, k)| k * rows[i * ow + x]).sum();
        }
    }
    out
}

/// Bicubic resize of every channel, clamped to `[0, 1]`.
pub fn resize_bicubic(img: &ImageRGB, width: usize, height: usize) -> Result<ImageRGB> {
    if width == 0 || height == 0 {
        return Err(CoreError::Domain(format!("cannot resize to {width}×{height}")));
    }
    let planes: Vec<Vec<f32>> = (0..3)
        .map(|c| resize_plane(&img.plane(c), img.width(), img.height(), width, height))
        .collect();
    ImageRGB::from_planes(width, height, [&planes[0], &planes[1], &planes[2]])
}

/// Bicubic downsample by 2 or 4. Dimensions that are not multiples of the
/// factor are first reflect-padded up to the next multiple.
pub fn downsample(img: &ImageRGB, factor: usize) -> Result<ImageRGB> {
    if factor != 2 && factor != 4 {
        return Err(CoreError::Config(format!("downsample factor must be 2 or 4, got {factor}")));
    }
    let (w, h) = (img.width(), img.height());
    let (pw, ph) = (w.next_multiple_of(factor), h.next_multiple_of(factor));
    let padded;
    let src = if (pw, ph) == (w, h) {
        img
    } else {
        padded = ImageRGB::from_fn(pw, ph, |y, x| {
            let (sy, sx) = (reflect(y as i64, h), reflect(x as i64, w));
            [0, 1, 2].map(|c| img.get(sy, sx, c))
        })?;
        &padded
    };
    resize_bicubic(src, pw / factor, ph / factor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_normalised() {
        for (n, m) in [(8, 4), (8, 2), (5, 9), (3, 3)] {
            for taps in axis_taps(n, m) {
                let s: f32 = taps.iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_resize_is_exact_copy() {
        let plane: Vec<f32> = (0..12).map(|i| i as f32 / 12.0).collect();
        let out = resize_plane(&plane, 4, 3, 4, 3);
        for (a, b) in plane.iter().zip(&out) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reflect_folds() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(-7, 4), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn blur_preserves_constants() {
        let out = gaussian_blur(&[0.3; 20], 5, 4, 1.5);
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }
}
