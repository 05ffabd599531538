//! Prompt canvas construction.
//!
//! Layout `v1`: two columns (input | output) and `k + 1` rows of square
//! panels. Rows `0..k` hold the retrieved exemplars in rank order, nearest
//! first, with their masks rendered white-on-black. Row `k` holds the test
//! image and an all-zero panel that the segmenter is expected to fill in.

use thiserror::Error;

use crate::dataset::LabeledExample;
use crate::imaging::{encode_png, BinaryMask, ImagingError, RasterImage};

pub const LAYOUT_VERSION: &str = "v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("a prompt needs at least one exemplar")]
    EmptyExemplarList,
    #[error("{what}: expected {expected}, got {actual}")]
    DimensionMismatch { what: String, expected: String, actual: String },
}

fn mismatch(what: impl Into<String>, expected: impl ToString, actual: impl ToString) -> PromptError {
    PromptError::DimensionMismatch {
        what: what.into(),
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

/// A binary mask rendered as an image: foreground white, background black.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPanel(RasterImage);

impl MaskPanel {
    pub fn image(&self) -> &RasterImage {
        &self.0
    }

    pub fn into_image(self) -> RasterImage {
        self.0
    }
}

pub fn mask_to_panel(mask: &BinaryMask, panel_side: usize) -> Result<MaskPanel, PromptError> {
    if mask.width() != panel_side || mask.height() != panel_side {
        return Err(mismatch(
            "mask",
            format!("{panel_side}x{panel_side}"),
            format!("{}x{}", mask.width(), mask.height()),
        ));
    }
    let pixels = mask
        .bits()
        .iter()
        .flat_map(|&b| [if b { 1.0 } else { 0.0 }; 3])
        .collect();
    let img = RasterImage::new(panel_side, panel_side, pixels)
        .expect("mask dimensions already validated");
    Ok(MaskPanel(img))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptCanvas {
    pub panel_side: usize,
    pub k: usize,
    pub image: RasterImage,
    pub layout_version: &'static str,
}

impl PromptCanvas {
    pub fn to_png(&self) -> Result<Vec<u8>, ImagingError> {
        encode_png(&self.image)
    }

    /// Panel at (`row`, `col`), `col` 0 for inputs and 1 for outputs.
    pub fn panel(&self, row: usize, col: usize) -> RasterImage {
        assert!(row <= self.k && col < 2, "panel ({row}, {col}) outside a k={} canvas", self.k);
        self.image.crop(col * self.panel_side, row * self.panel_side, self.panel_side, self.panel_side)
    }
}

fn check_square(what: &str, img: &RasterImage, side: usize) -> Result<(), PromptError> {
    if img.width() != side || img.height() != side {
        return Err(mismatch(what, format!("{side}x{side}"), format!("{}x{}", img.width(), img.height())));
    }
    Ok(())
}

/// Stitches exemplars (in the given order) and the test image into a canvas.
///
/// The panel side is taken from the test image, which must be square.
pub fn build_prompt(exemplars: &[LabeledExample], test: &RasterImage) -> Result<PromptCanvas, PromptError> {
    if exemplars.is_empty() {
        return Err(PromptError::EmptyExemplarList);
    }
    let side = test.width();
    check_square("test image", test, side)?;
    let k = exemplars.len();
    let mut canvas = RasterImage::filled(2 * side, (k + 1) * side, [0.0; 3])
        .expect("canvas dimensions are positive");
    for (row, ex) in exemplars.iter().enumerate() {
        check_square(&format!("exemplar {:?} image", ex.id), &ex.image, side)?;
        let panel = mask_to_panel(&ex.mask, side).map_err(|_| {
            mismatch(
                format!("exemplar {:?} mask", ex.id),
                format!("{side}x{side}"),
                format!("{}x{}", ex.mask.width(), ex.mask.height()),
            )
        })?;
        canvas.blit(&ex.image, 0, row * side);
        canvas.blit(panel.image(), side, row * side);
    }
    canvas.blit(test, 0, k * side);
    Ok(PromptCanvas { panel_side: side, k, image: canvas, layout_version: LAYOUT_VERSION })
}

/// Number of exemplar rows implied by a canvas of the given size.
pub fn infer_k(width: usize, height: usize, panel_side: usize) -> Result<usize, PromptError> {
    if panel_side == 0 || width != 2 * panel_side {
        return Err(mismatch("canvas width", 2 * panel_side, width));
    }
    if height % panel_side != 0 || height / panel_side < 2 {
        return Err(mismatch(
            "canvas height",
            format!("a multiple of {panel_side} with at least 2 rows"),
            height,
        ));
    }
    Ok(height / panel_side - 1)
}

/// Cuts the output panel of the last row (the blank panel in the prompt)
/// out of a canvas-sized prediction.
pub fn extract_prediction_region(prediction: &RasterImage, panel_side: usize) -> Result<RasterImage, PromptError> {
    let k = infer_k(prediction.width(), prediction.height(), panel_side)?;
    Ok(prediction.crop(panel_side, k * panel_side, panel_side, panel_side))
}
