//! Segmenter backends.
//!
//! A backend turns an ordered list of exemplars plus a test image into a
//! [`SoftMask`] for the test image. Predictions depend only on those inputs;
//! nothing is learned or updated between calls.

mod reference;
mod remote;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledExample;
use crate::imaging::{encode_luma8_png, quantize, BinaryMask, ImagingError, RasterImage};
use crate::prompt::PromptError;

pub use reference::{reference_patchmatch, Aggregation, PatchMatchParams, ReferenceBackend};
pub use remote::{remote_segment, RemoteBackend, DEFAULT_TIMEOUT_SECS};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("a prompt needs at least one exemplar")]
    EmptyExemplarList,
    #[error("{patch}x{patch} patch does not fit a {width}x{height} image")]
    PatchLargerThanImage { patch: usize, width: usize, height: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid backend parameters: {0}")]
    InvalidParams(String),
    #[error("could not connect to {endpoint}: {message}")]
    Connect { endpoint: String, message: String },
    #[error("request to {endpoint} timed out after {timeout:?}")]
    Timeout { endpoint: String, timeout: Duration },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server returned {status}: {body}")]
    Server { status: u16, body: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

impl BackendError {
    /// True for failures of a remote service rather than of the inputs.
    pub fn is_remote_failure(&self) -> bool {
        matches!(
            self,
            BackendError::Connect { .. }
                | BackendError::Timeout { .. }
                | BackendError::Protocol(_)
                | BackendError::Server { .. }
        )
    }
}

/// Per-pixel foreground confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl SoftMask {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self, BackendError> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(BackendError::DimensionMismatch(format!(
                "{} values for a {width}x{height} soft mask",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(BackendError::InvalidParams("soft mask values must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, values })
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width(),
            height: mask.height(),
            values: mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
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

    pub fn to_png(&self) -> Result<Vec<u8>, ImagingError> {
        let bytes: Vec<u8> = self.values.iter().map(|&v| quantize(v)).collect();
        encode_luma8_png(self.width, self.height, &bytes)
    }
}

/// Foreground iff `value >= threshold`.
pub fn binarize(soft: &SoftMask, threshold: f64) -> BinaryMask {
    let bits = soft.values.iter().map(|&v| v as f64 >= threshold).collect();
    BinaryMask::new(soft.width, soft.height, bits).expect("soft mask dimensions are valid")
}

/// A pluggable segmenter.
pub trait Segmenter: Send + Sync {
    fn tag(&self) -> &'static str;

    fn segment(&self, exemplars: &[LabeledExample], test: &RasterImage) -> Result<SoftMask, BackendError>;
}

/// Backend selection, as recorded in report snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    Reference { patch: PatchMatchParams },
    Remote { endpoint: String, timeout_secs: f64 },
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Reference { patch: PatchMatchParams::default() }
    }
}

impl BackendSpec {
    pub fn remote(endpoint: impl Into<String>) -> Self {
        BackendSpec::Remote { endpoint: endpoint.into(), timeout_secs: DEFAULT_TIMEOUT_SECS }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            BackendSpec::Reference { .. } => "reference",
            BackendSpec::Remote { .. } => "remote",
        }
    }

    pub fn build(&self) -> Result<Box<dyn Segmenter>, BackendError> {
        Ok(match self {
            BackendSpec::Reference { patch } => {
                patch.validate()?;
                Box::new(ReferenceBackend::new(*patch))
            }
            BackendSpec::Remote { endpoint, timeout_secs } => {
                if !(*timeout_secs > 0.0 && timeout_secs.is_finite()) {
                    return Err(BackendError::InvalidParams("timeout must be positive".into()));
                }
                Box::new(RemoteBackend::new(endpoint, Duration::from_secs_f64(*timeout_secs))?)
            }
        })
    }
}

/// Dispatches to the backend described by `spec`.
pub fn segment(
    exemplars: &[LabeledExample],
    test: &RasterImage,
    spec: &BackendSpec,
) -> Result<SoftMask, BackendError> {
    if exemplars.is_empty() {
        return Err(BackendError::EmptyExemplarList);
    }
    spec.build()?.segment(exemplars, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_threshold_convention() {
        let s = SoftMask::new(3, 1, vec![1.0, 0.0, 0.5]).unwrap();
        assert_eq!(binarize(&s, DEFAULT_THRESHOLD).bits(), &[true, false, true]);
        assert_eq!(binarize(&s, 0.6).bits(), &[true, false, false]);
        assert!(SoftMask::new(1, 1, vec![1.5]).is_err());
        assert!(SoftMask::new(2, 1, vec![0.5]).is_err());
    }

    #[test]
    fn spec_serialization_and_tags() {
        let r = BackendSpec::default();
        assert_eq!(r.tag(), "reference");
        let json = serde_json::to_string(&BackendSpec::remote("http://localhost:9")).unwrap();
        assert!(json.contains("\"kind\":\"remote\""), "{json}");
        let back: BackendSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.tag(), "remote");
        let bad = BackendSpec::Remote { endpoint: "http://x".into(), timeout_secs: 0.0 };
        assert!(bad.build().is_err());
    }

    #[test]
    fn segment_rejects_empty_prompt() {
        let test = RasterImage::filled(8, 8, [0.0; 3]).unwrap();
        assert!(matches!(
            segment(&[], &test, &BackendSpec::default()),
            Err(BackendError::EmptyExemplarList)
        ));
    }
}
