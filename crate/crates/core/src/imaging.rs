//! Image containers, decoding/encoding, resizing and normalization.
//!
//! All raster data is row-major. Color images are interleaved RGB with values
//! in `[0, 1]`; an 8-bit sample `v` decodes to `v / 255`.

use std::io::Cursor;

use image::{ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub const IMAGENET_MEANS: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STDS: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("malformed image stream: {0}")]
    Decode(String),
    #[error("unsupported image container (only PNG and JPEG are accepted)")]
    UnsupportedFormat,
    #[error("png encoding failed: {0}")]
    Encode(String),
    #[error("invalid dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("pixel buffer has {actual} samples, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("pixel value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
}

/// Decoded 3-channel image, interleaved RGB, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidDimensions { width, height });
        }
        let expected = width * height * 3;
        if pixels.len() != expected {
            return Err(ImagingError::BufferLength { expected, actual: pixels.len() });
        }
        if let Some(&v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImagingError::OutOfRange(v as f64));
        }
        Ok(Self { width, height, pixels })
    }

    /// Image filled with a single color.
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self, ImagingError> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, pixels)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self, ImagingError> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
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

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Quantizes to 8 bits per channel, round-half-up.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    /// Copies `src` into this image with its top-left corner at `(x0, y0)`.
    /// The caller guarantees the region fits.
    pub(crate) fn blit(&mut self, src: &RasterImage, x0: usize, y0: usize) {
        let row = src.width * 3;
        for y in 0..src.height {
            let dst = ((y0 + y) * self.width + x0) * 3;
            self.pixels[dst..dst + row].copy_from_slice(&src.pixels[y * row..(y + 1) * row]);
        }
    }

    /// Copies out a `width`×`height` region starting at `(x0, y0)`.
    pub(crate) fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> RasterImage {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + width * 3]);
        }
        RasterImage { width, height, pixels }
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Single-channel image used as the operand of the similarity metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidDimensions { width, height });
        }
        if pixels.len() != width * height {
            return Err(ImagingError::BufferLength {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        if let Some(&v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImagingError::OutOfRange(v));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// Z-scored image; values are unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

/// Per-pixel foreground/background labeling.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidDimensions { width, height });
        }
        if bits.len() != width * height {
            return Err(ImagingError::BufferLength {
                expected: width * height,
                actual: bits.len(),
            });
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, ImagingError> {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_foreground(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Foreground as 255, background as 0.
    pub fn to_luma8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_side: usize,
    pub channel_means: [f64; 3],
    pub channel_stds: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_side: 448,
            channel_means: IMAGENET_MEANS,
            channel_stds: IMAGENET_STDS,
        }
    }
}

impl PreprocessConfig {
    pub fn with_side(target_side: usize) -> Self {
        Self { target_side, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        if self.target_side == 0 {
            return Err(ImagingError::InvalidConfig("target_side must be positive".into()));
        }
        if self.channel_stds.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(ImagingError::InvalidConfig("channel stds must be positive".into()));
        }
        if self.channel_means.iter().any(|m| !m.is_finite()) {
            return Err(ImagingError::InvalidConfig("channel means must be finite".into()));
        }
        Ok(())
    }
}

fn sniff_format(bytes: &[u8]) -> Result<ImageFormat, ImagingError> {
    match image::guess_format(bytes) {
        Ok(f @ (ImageFormat::Png | ImageFormat::Jpeg)) => Ok(f),
        Ok(_) => Err(ImagingError::UnsupportedFormat),
        // Neither a PNG nor a JPEG signature.
        Err(_) if bytes.len() >= 8 => Err(ImagingError::UnsupportedFormat),
        Err(e) => Err(ImagingError::Decode(e.to_string())),
    }
}

fn decode_dynamic(bytes: &[u8]) -> Result<image::DynamicImage, ImagingError> {
    let format = sniff_format(bytes)?;
    let mut reader = ImageReader::new(Cursor::new(bytes));
    reader.set_format(format);
    reader.decode().map_err(|e| ImagingError::Decode(e.to_string()))
}

/// Decodes a PNG or JPEG stream into an RGB image in `[0, 1]`.
///
/// Grayscale sources are replicated across channels; alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<RasterImage, ImagingError> {
    let rgb = decode_dynamic(bytes)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    RasterImage::new(w as usize, h as usize, pixels)
}

/// Decodes a mask image: a pixel is foreground when any channel is ≥ 128.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask, ImagingError> {
    let rgb = decode_dynamic(bytes)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let bits = rgb.pixels().map(|p| p.0.iter().any(|&c| c >= 128)).collect();
    BinaryMask::new(w as usize, h as usize, bits)
}

/// Decodes a PNG that must be 8-bit single-channel grayscale.
pub(crate) fn decode_luma8_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), ImagingError> {
    if sniff_format(bytes)? != ImageFormat::Png {
        return Err(ImagingError::UnsupportedFormat);
    }
    match decode_dynamic(bytes)? {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Ok((w as usize, h as usize, buf.into_raw()))
        }
        other => Err(ImagingError::Decode(format!(
            "expected 8-bit grayscale, got {:?}",
            other.color()
        ))),
    }
}

fn encode_png_raw(
    width: usize,
    height: usize,
    data: &[u8],
    color: image::ExtendedColorType,
) -> Result<Vec<u8>, ImagingError> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(data, width as u32, height as u32, color)
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    Ok(out)
}

/// 8-bit RGB PNG, non-interlaced.
pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>, ImagingError> {
    encode_png_raw(img.width, img.height, &img.to_rgb8(), image::ExtendedColorType::Rgb8)
}

/// 8-bit grayscale PNG with foreground 255.
pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>, ImagingError> {
    encode_png_raw(mask.width, mask.height, &mask.to_luma8(), image::ExtendedColorType::L8)
}

/// 8-bit grayscale PNG from samples already quantized by the caller.
pub fn encode_luma8_png(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>, ImagingError> {
    encode_png_raw(width, height, data, image::ExtendedColorType::L8)
}

/// Source coordinate and blend weight for half-pixel-centered sampling.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `side`×`side` with half-pixel-centered sampling.
///
/// Non-square inputs are stretched anisotropically.
pub fn resize_bilinear(img: &RasterImage, side: usize) -> RasterImage {
    assert!(side > 0, "resize side must be positive");
    if img.width == side && img.height == side {
        return img.clone();
    }
    let xs = bilinear_taps(side, img.width);
    let ys = bilinear_taps(side, img.height);
    let mut pixels = Vec::with_capacity(side * side * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let at = |x: usize, y: usize| img.pixels[(y * img.width + x) * 3 + c] as f64;
                let top = lerp(at(x0, y0), at(x1, y0), fx);
                let bottom = lerp(at(x0, y1), at(x1, y1), fx);
                pixels.push(lerp(top, bottom, fy).clamp(0.0, 1.0) as f32);
            }
        }
    }
    RasterImage { width: side, height: side, pixels }
}

// `a + t * (b - a)` keeps constants exact, unlike `a * (1 - t) + b * t`.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

fn nearest_index(o: usize, out_len: usize, in_len: usize) -> usize {
    let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
    src.min(in_len - 1)
}

/// Nearest-neighbor resize of a mask to `side`×`side`; never introduces new labels.
pub fn resize_mask_nearest(mask: &BinaryMask, side: usize) -> BinaryMask {
    assert!(side > 0, "resize side must be positive");
    if mask.width == side && mask.height == side {
        return mask.clone();
    }
    let xs: Vec<usize> = (0..side).map(|x| nearest_index(x, side, mask.width)).collect();
    let mut bits = Vec::with_capacity(side * side);
    for y in 0..side {
        let sy = nearest_index(y, side, mask.height);
        bits.extend(xs.iter().map(|&sx| mask.get(sx, sy)));
    }
    BinaryMask { width: side, height: side, bits }
}

/// BT.601 luma, clamped to the channel range so rounding can never leave it.
pub fn to_grayscale(img: &RasterImage) -> GrayImage {
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|p| {
            let [r, g, b] = [p[0] as f64, p[1] as f64, p[2] as f64];
            let y = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b;
            y.clamp(r.min(g).min(b), r.max(g).max(b))
        })
        .collect();
    GrayImage { width: img.width, height: img.height, pixels }
}

pub fn normalize_zscore(img: &RasterImage, cfg: &PreprocessConfig) -> NormalizedImage {
    let pixels = img
        .pixels
        .chunks_exact(3)
        .flat_map(|p| {
            (0..3).map(move |c| (p[c] as f64 - cfg.channel_means[c]) / cfg.channel_stds[c])
        })
        .collect();
    NormalizedImage { width: img.width, height: img.height, pixels }
}

/// Inverse of [`normalize_zscore`]; returns raw interleaved samples.
pub fn denormalize_zscore(img: &NormalizedImage, cfg: &PreprocessConfig) -> Vec<f64> {
    img.pixels
        .chunks_exact(3)
        .flat_map(|p| (0..3).map(move |c| p[c] * cfg.channel_stds[c] + cfg.channel_means[c]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png_rgb(width: u32, height: u32, data: &[u8]) -> Vec<u8> {
        encode_png_raw(width as usize, height as usize, data, image::ExtendedColorType::Rgb8)
            .unwrap()
    }

    #[test]
    fn decode_white_and_black() {
        let white = decode_image(&png_rgb(1, 1, &[255, 255, 255])).unwrap();
        assert_eq!(white.pixels(), &[1.0, 1.0, 1.0]);
        let black = decode_image(&png_rgb(1, 1, &[0, 0, 0])).unwrap();
        assert_eq!(black.pixels(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn decode_rejects_garbage_and_other_containers() {
        assert!(matches!(
            decode_image(b"\x89PNG\r\n\x1a\ngarbage-after-signature"),
            Err(ImagingError::Decode(_))
        ));
        assert!(matches!(decode_image(b"GIF89a\x01\x00\x01\x00"), Err(ImagingError::UnsupportedFormat)));
        assert!(matches!(decode_image(b"hello world, not an image"), Err(ImagingError::UnsupportedFormat)));
    }

    #[test]
    fn decode_mask_thresholds_any_channel() {
        let bytes = png_rgb(3, 1, &[127, 127, 127, 0, 0, 128, 200, 0, 0]);
        let m = decode_mask(&bytes).unwrap();
        assert_eq!(m.bits(), &[false, true, true]);
        let gray = encode_luma8_png(2, 1, &[128, 127]).unwrap();
        assert_eq!(decode_mask(&gray).unwrap().bits(), &[true, false]);
    }

    #[test]
    fn identity_resize_and_constant_resize() {
        let img = RasterImage::from_fn(7, 5, |x, y| [x as f32 / 7.0, y as f32 / 5.0, 0.5]).unwrap();
        let sq = resize_bilinear(&img, 9);
        assert_eq!(resize_bilinear(&sq, 9), sq);

        let c = RasterImage::filled(100, 80, [0.3, 0.6, 0.9]).unwrap();
        let r = resize_bilinear(&c, 448);
        assert_eq!((r.width(), r.height()), (448, 448));
        assert!(r.pixels().chunks_exact(3).all(|p| p == [0.3, 0.6, 0.9]));
    }

    #[test]
    fn grayscale_weights() {
        let white = RasterImage::filled(2, 2, [1.0; 3]).unwrap();
        assert!(to_grayscale(&white).pixels().iter().all(|&v| v == 1.0));
        let black = RasterImage::filled(2, 2, [0.0; 3]).unwrap();
        assert!(to_grayscale(&black).pixels().iter().all(|&v| v == 0.0));
        let red = RasterImage::filled(1, 1, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(to_grayscale(&red).pixels()[0], 0.299);
    }

    #[test]
    fn zscore_examples() {
        let img = RasterImage::filled(1, 1, [1.0, 0.456, 0.25]).unwrap();
        let id = PreprocessConfig { channel_means: [0.0; 3], channel_stds: [1.0; 3], ..Default::default() };
        let out = normalize_zscore(&img, &id);
        assert_eq!(out.pixels, vec![1.0, 0.456f32 as f64, 0.25]);

        let cfg = PreprocessConfig::default();
        let out = normalize_zscore(&img, &cfg);
        assert!((out.pixels[0] - 2.248_908_296_943_231).abs() < 1e-12);
        assert!(out.pixels[1].abs() < 1e-7, "value at the mean centers to ~0 (f32 storage)");
    }

    #[test]
    fn config_validation() {
        assert!(PreprocessConfig::default().validate().is_ok());
        assert!(PreprocessConfig::with_side(0).validate().is_err());
        let bad = PreprocessConfig { channel_stds: [0.2, 0.0, 0.2], ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn nearest_mask_resize_stays_binary() {
        let m = BinaryMask::from_fn(5, 3, |x, y| (x + y) % 2 == 0).unwrap();
        let r = resize_mask_nearest(&m, 11);
        assert_eq!(r.bits().len(), 121);
        // every output label must come from some source pixel
        assert!(r.count_foreground() > 0 && r.count_foreground() < 121);
    }

    #[test]
    fn constructors_validate() {
        assert!(RasterImage::new(0, 1, vec![]).is_err());
        assert!(RasterImage::new(1, 1, vec![0.0; 2]).is_err());
        assert!(RasterImage::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(GrayImage::new(1, 1, vec![-0.1]).is_err());
        assert!(BinaryMask::new(2, 2, vec![true; 3]).is_err());
    }
}
