//! HTTP client for an external in-context segmentation server.
//!
//! Wire protocol: `POST <endpoint>/segment` with a multipart body holding
//! `canvas` (PNG of the prompt canvas), `k` (decimal exemplar count) and
//! `layout` (canvas layout version). A successful response is an 8-bit
//! grayscale PNG of exactly `panel_side`×`panel_side`; each byte `v` becomes
//! foreground confidence `v / 255`.

use std::time::Duration;

use reqwest::blocking::{multipart, Client};

use super::{BackendError, Segmenter, SoftMask};
use crate::dataset::LabeledExample;
use crate::imaging::{decode_luma8_png, RasterImage};
use crate::prompt::{build_prompt, PromptCanvas};

pub const DEFAULT_TIMEOUT_SECS: f64 = 60.0;

/// Accepts either a base URL or one already ending in `/segment`.
fn segment_url(endpoint: &str) -> String {
    let base = endpoint.trim_end_matches('/');
    if base.ends_with("/segment") {
        base.to_string()
    } else {
        format!("{base}/segment")
    }
}

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    url: String,
    timeout: Duration,
    client: Client,
}

impl RemoteBackend {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, BackendError> {
        let url = segment_url(endpoint);
        reqwest::Url::parse(&url)
            .map_err(|e| BackendError::InvalidParams(format!("bad endpoint {endpoint:?}: {e}")))?;
        let client = Client::builder()
            .timeout(timeout)
            .connect_timeout(timeout)
            .build()
            .map_err(|e| BackendError::InvalidParams(format!("http client: {e}")))?;
        Ok(Self { url, timeout, client })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn send(&self, canvas: &PromptCanvas) -> Result<SoftMask, BackendError> {
        let png = canvas.to_png()?;
        let part = multipart::Part::bytes(png)
            .file_name("canvas.png")
            .mime_str("image/png")
            .expect("static mime type parses");
        let form = multipart::Form::new()
            .part("canvas", part)
            .text("k", canvas.k.to_string())
            .text("layout", canvas.layout_version);

        let response = self.client.post(&self.url).multipart(form).send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout { endpoint: self.url.clone(), timeout: self.timeout }
            } else {
                BackendError::Connect { endpoint: self.url.clone(), message: e.to_string() }
            }
        })?;
        let status = response.status();
        let body = response.bytes().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout { endpoint: self.url.clone(), timeout: self.timeout }
            } else {
                BackendError::Protocol(format!("reading response body: {e}"))
            }
        })?;
        if !status.is_success() {
            return Err(BackendError::Server {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&body).into_owned(),
            });
        }

        let (w, h, bytes) = decode_luma8_png(&body)
            .map_err(|e| BackendError::Protocol(format!("response is not a grayscale PNG: {e}")))?;
        let side = canvas.panel_side;
        if (w, h) != (side, side) {
            return Err(BackendError::Protocol(format!("expected a {side}x{side} mask, got {w}x{h}")));
        }
        SoftMask::new(w, h, bytes.into_iter().map(|v| v as f32 / 255.0).collect())
    }
}

impl Segmenter for RemoteBackend {
    fn tag(&self) -> &'static str {
        "remote"
    }

    fn segment(&self, exemplars: &[LabeledExample], test: &RasterImage) -> Result<SoftMask, BackendError> {
        self.send(&build_prompt(exemplars, test)?)
    }
}

/// Sends one canvas to `endpoint` and decodes the returned mask.
pub fn remote_segment(canvas: &PromptCanvas, endpoint: &str, timeout: Duration) -> Result<SoftMask, BackendError> {
    RemoteBackend::new(endpoint, timeout)?.send(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_normalization() {
        assert_eq!(segment_url("http://h:1"), "http://h:1/segment");
        assert_eq!(segment_url("http://h:1/"), "http://h:1/segment");
        assert_eq!(segment_url("http://h:1/api/segment"), "http://h:1/api/segment");
        assert!(RemoteBackend::new("not a url", Duration::from_secs(1)).is_err());
    }
}
