//! RGB images, transmission maps and their on-disk formats.

use std::fs;
use std::path::Path;

use hkd_tensor::Tensor;
use image::{ImageBuffer, Luma, Rgb};

use crate::error::{CoreError, Result};

/// Interleaved `H × W × 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl ImageRGB {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(CoreError::Domain(format!("empty image {width}×{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(CoreError::Domain(format!(
                "{width}×{height} RGB image needs {} values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, pixels)
    }

    /// Builds an image from `f(y, x) -> rgb`, clamping to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(y, x).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// One colour channel as a row-major `H × W` plane.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        self.pixels.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn from_planes(width: usize, height: usize, planes: [&[f32]; 3]) -> Result<Self> {
        let n = width * height;
        if planes.iter().any(|p| p.len() != n) {
            return Err(CoreError::Domain("plane sizes disagree with image size".into()));
        }
        let pixels = (0..n)
            .flat_map(|i| planes.map(|p| p[i].clamp(0.0, 1.0)))
            .collect();
        Self::new(width, height, pixels)
    }

    /// `1 × 3 × H × W` planar tensor.
    pub fn to_tensor(&self) -> Tensor {
        stack(&[self]).expect("a single image always stacks")
    }

    /// Batch item `index` of a `B × 3 × H × W` tensor, clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let [b, c, h, w] = t.dims4()?;
        if c != 3 || index >= b {
            return Err(CoreError::Domain(format!(
                "cannot take RGB image {index} from tensor of shape {:?}",
                t.shape()
            )));
        }
        let plane = h * w;
        let base = &t.data()[index * 3 * plane..(index + 1) * 3 * plane];
        let planes = [&base[..plane], &base[plane..2 * plane], &base[2 * plane..]];
        let mut pixels = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for p in planes {
                let v = p[i];
                pixels.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            }
        }
        Self::new(w, h, pixels)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f32> {
        self.check_same_size(other)?;
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub(crate) fn check_same_size(&self, other: &Self) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(hkd_tensor::TensorError::Dimension {
                op: "image pair",
                detail: format!(
                    "height×width {}×{} vs {}×{}",
                    self.height, self.width, other.height, other.width
                ),
            }
            .into());
        }
        Ok(())
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantize8(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|v| (v * 255.0).round() / 255.0).collect(),
        }
    }
}

/// Stacks equally sized images into a `B × 3 × H × W` tensor.
pub fn stack(images: &[&ImageRGB]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| CoreError::Usage("cannot stack zero images".into()))?;
    let (h, w) = (first.height, first.width);
    let plane = h * w;
    let mut data = vec![0.0f32; images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        first.check_same_size(img)?;
        for (i, px) in img.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[(b * 3 + c) * plane + i] = px[c];
            }
        }
    }
    Ok(Tensor::new([images.len(), 3, h, w], data)?)
}

/// Per-pixel transmission `t(x) ∈ (0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl TransmissionMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height || values.is_empty() {
            return Err(CoreError::Domain(format!(
                "{width}×{height} transmission map needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(CoreError::Domain(format!("transmission {v} outside (0, 1]")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase()
}

/// Loads an RGB PNG or binary PPM (P6). Any other colour layout is rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    if extension(path) == "ppm" || bytes.starts_with(b"P6") {
        return decode_ppm(&bytes).map_err(|detail| CoreError::format(path, detail));
    }
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| CoreError::format(path, e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let pixels: Vec<f32> = match decoded {
        image::DynamicImage::ImageRgb8(buf) => buf.into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        image::DynamicImage::ImageRgb16(buf) => buf.into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        other => {
            return Err(CoreError::format(
                path,
                format!("expected an RGB image, found {:?}", other.color()),
            ))
        }
    };
    ImageRGB::new(w, h, pixels)
}

/// Saves as 8-bit RGB; the format follows the extension (`.png` or `.ppm`).
pub fn save_image(img: &ImageRGB, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.pixels.iter().map(|&v| to_u8(v)).collect();
    match extension(path).as_str() {
        "ppm" => {
            let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&bytes);
            fs::write(path, out).map_err(|e| CoreError::io(path, e))
        }
        "png" => {
            let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(img.width as u32, img.height as u32, bytes)
                .expect("buffer size matches dimensions");
            write_png(path, |w| buf.write_to(w, image::ImageFormat::Png))
        }
        other => Err(CoreError::format(path, format!("unsupported extension {other:?}"))),
    }
}

/// Saves a transmission map as a 16-bit greyscale PNG.
pub fn save_transmission(t: &TransmissionMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u16> = t.values.iter().map(|&v| to_u16(v)).collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(t.width as u32, t.height as u32, raw)
        .expect("buffer size matches dimensions");
    write_png(path, |w| buf.write_to(w, image::ImageFormat::Png))
}

pub fn load_transmission(path: impl AsRef<Path>) -> Result<TransmissionMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| CoreError::format(path, e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let values = match decoded {
        image::DynamicImage::ImageLuma16(buf) => buf.into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        other => {
            return Err(CoreError::format(
                path,
                format!("expected a greyscale map, found {:?}", other.color()),
            ))
        }
    };
    TransmissionMap::new(w, h, values).map_err(|e| CoreError::format(path, e.to_string()))
}

fn write_png(
    path: &Path,
    encode: impl FnOnce(&mut std::io::Cursor<Vec<u8>>) -> image::ImageResult<()>,
) -> Result<()> {
    let mut cursor = std::io::Cursor::new(Vec::new());
    encode(&mut cursor).map_err(|e| CoreError::format(path, e.to_string()))?;
    fs::write(path, cursor.into_inner()).map_err(|e| CoreError::io(path, e))
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Decodes a binary PPM (P6) per the Netpbm specification; `maxval` above
/// 255 uses two big-endian bytes per sample.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<ImageRGB, String> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(format!("expected magic P6, found {magic:?}"));
    }
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let tok = header_token(bytes, &mut pos)?;
        tok.parse::<usize>()
            .map_err(|_| format!("invalid {what} {tok:?}"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let need = width * height * 3 * sample_bytes;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("raster truncated: need {need} bytes"))?;
    let scale = maxval as f32;
    let pixels = if sample_bytes == 1 {
        raster.iter().map(|&v| (v as f32 / scale).min(1.0)).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|p| (u16::from_be_bytes([p[0], p[1]]) as f32 / scale).min(1.0))
            .collect()
    };
    ImageRGB::new(width, height, pixels).map_err(|e| e.to_string())
}

fn header_token(bytes: &[u8], pos: &mut usize) -> std::result::Result<String, String> {
    loop {
        match bytes.get(*pos) {
            None => return Err("header truncated".into()),
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}
