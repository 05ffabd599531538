//! Dataset manifests, example loading and cache keys.
//!
//! A manifest is one JSON file:
//!
//! ```json
//! {
//!   "version": "1",
//!   "entries": [
//!     { "id": "img_001", "image_path": "images/001.jpg", "mask_path": "masks/001.png", "split": "train" },
//!     { "id": "img_002", "image_path": "images/002.jpg", "mask_path": "masks/002.png", "split": "test" }
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the directory holding the manifest. Ids
//! must be unique and may not contain commas, quotes or whitespace (they
//! appear verbatim in CSV headers).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imaging::{
    decode_image, decode_mask, resize_bilinear, resize_mask_nearest, BinaryMask, ImagingError,
    PreprocessConfig, RasterImage,
};
use crate::similarity::{Metric, SsimParams};

pub const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("invalid id {0:?}: ids must be non-empty without commas, quotes or whitespace")]
    InvalidId(String),
    #[error("{}missing file {}", .id.as_ref().map(|i| format!("entry {i:?}: ")).unwrap_or_default(), .path.display())]
    MissingFile { id: Option<String>, path: PathBuf },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("entry {id:?}: {path}: {source}")]
    Decode {
        id: String,
        path: PathBuf,
        #[source]
        source: ImagingError,
    },
    #[error("example {id:?}: image is {image_w}x{image_h} but mask is {mask_w}x{mask_h}")]
    DimensionMismatch { id: String, image_w: usize, image_h: usize, mask_w: usize, mask_h: usize },
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error(transparent)]
    Config(#[from] ImagingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_version")]
    pub version: String,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

fn default_version() -> String {
    MANIFEST_VERSION.to_string()
}

pub fn is_valid_id(id: &str) -> bool {
    !id.is_empty() && !id.chars().any(|c| c == ',' || c == '"' || c.is_whitespace() || c.is_control())
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self { version: default_version(), entries, root: root.into() }
    }

    /// Parses without checking ids or files.
    pub fn parse(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => DatasetError::MissingFile { id: None, path: path.to_path_buf() },
            _ => DatasetError::Io { path: path.to_path_buf(), source: e },
        })?;
        let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Every validation problem, in entry order.
    pub fn issues(&self) -> Vec<DatasetError> {
        let mut issues = Vec::new();
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !is_valid_id(&e.id) {
                issues.push(DatasetError::InvalidId(e.id.clone()));
            }
            if !seen.insert(e.id.as_str()) {
                issues.push(DatasetError::DuplicateId(e.id.clone()));
            }
            for p in [&e.image_path, &e.mask_path] {
                let full = self.resolve(p);
                if !full.is_file() {
                    issues.push(DatasetError::MissingFile { id: Some(e.id.clone()), path: full });
                }
            }
        }
        issues
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Parses and validates a manifest, failing on the first problem.
pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let manifest = Manifest::parse(path)?;
    match manifest.issues().into_iter().next() {
        Some(err) => Err(err),
        None => Ok(manifest),
    }
}

/// An image with its ground-truth mask, both at the panel resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub image: RasterImage,
    pub mask: BinaryMask,
}

impl LabeledExample {
    pub fn new(id: impl Into<String>, image: RasterImage, mask: BinaryMask) -> Result<Self, DatasetError> {
        let id = id.into();
        if (image.width(), image.height()) != (mask.width(), mask.height()) {
            return Err(DatasetError::DimensionMismatch {
                id,
                image_w: image.width(),
                image_h: image.height(),
                mask_w: mask.width(),
                mask_h: mask.height(),
            });
        }
        Ok(Self { id, image, mask })
    }
}

/// Preprocessed train and test splits, each sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(mut train: Vec<LabeledExample>, mut test: Vec<LabeledExample>) -> Self {
        train.sort_by(|a, b| a.id.cmp(&b.id));
        test.sort_by(|a, b| a.id.cmp(&b.id));
        Self { train, test }
    }

    pub fn require_splits(&self) -> Result<(), DatasetError> {
        if self.train.is_empty() {
            return Err(DatasetError::EmptySplit(Split::Train));
        }
        if self.test.is_empty() {
            return Err(DatasetError::EmptySplit(Split::Test));
        }
        Ok(())
    }

    pub fn panel_side(&self) -> Option<usize> {
        self.train.first().or(self.test.first()).map(|e| e.image.width())
    }
}

fn read_file(id: &str, path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::MissingFile { id: Some(id.into()), path: path.into() },
        _ => DatasetError::Io { path: path.into(), source: e },
    })
}

/// Decodes and resizes one entry: bilinear for the image, nearest-neighbor
/// for the mask.
pub fn load_example(manifest: &Manifest, entry: &ManifestEntry, cfg: &PreprocessConfig) -> Result<LabeledExample, DatasetError> {
    let decode_err = |path: &Path| {
        let (id, path) = (entry.id.clone(), path.to_path_buf());
        move |source| DatasetError::Decode { id, path, source }
    };
    let image_path = manifest.resolve(&entry.image_path);
    let mask_path = manifest.resolve(&entry.mask_path);
    let image = decode_image(&read_file(&entry.id, &image_path)?).map_err(decode_err(&image_path))?;
    let mask = decode_mask(&read_file(&entry.id, &mask_path)?).map_err(decode_err(&mask_path))?;
    LabeledExample::new(
        entry.id.clone(),
        resize_bilinear(&image, cfg.target_side),
        resize_mask_nearest(&mask, cfg.target_side),
    )
}

pub fn load_examples(manifest: &Manifest, cfg: &PreprocessConfig) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    let loaded = manifest
        .entries
        .par_iter()
        .map(|e| Ok((e.split, load_example(manifest, e, cfg)?)))
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let (train, test): (Vec<_>, Vec<_>) = loaded.into_iter().partition(|(s, _)| *s == Split::Train);
    Ok(Dataset::new(
        train.into_iter().map(|(_, e)| e).collect(),
        test.into_iter().map(|(_, e)| e).collect(),
    ))
}

/// Content digests of every manifest entry, sorted by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fingerprint {
    entries: Vec<(String, Split, String, String)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Fingerprint {
    pub fn compute(manifest: &Manifest) -> Result<Self, DatasetError> {
        let mut entries = manifest
            .entries
            .par_iter()
            .map(|e| {
                let image = sha256_hex(&read_file(&e.id, &manifest.resolve(&e.image_path))?);
                let mask = sha256_hex(&read_file(&e.id, &manifest.resolve(&e.mask_path))?);
                Ok((e.id.clone(), e.split, image, mask))
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        entries.sort();
        Ok(Self { entries })
    }

    fn hasher(&self) -> Sha256 {
        let mut h = Sha256::new();
        h.update(b"promptseg-dataset-v1\n");
        for (id, split, image, mask) in &self.entries {
            h.update(format!("{id}\t{split}\t{image}\t{mask}\n").as_bytes());
        }
        h
    }

    /// 128-bit hex digest of dataset content.
    pub fn dataset_hash(&self) -> String {
        hex::encode(&self.hasher().finalize()[..16])
    }

    /// 128-bit hex key over dataset content, preprocessing and metric settings.
    pub fn cache_key(&self, cfg: &PreprocessConfig, metric: Metric, ssim: &SsimParams) -> String {
        let mut h = self.hasher();
        h.update(format!("side={}\n", cfg.target_side).as_bytes());
        for (m, s) in cfg.channel_means.iter().zip(&cfg.channel_stds) {
            h.update(format!("norm={:016x},{:016x}\n", m.to_bits(), s.to_bits()).as_bytes());
        }
        h.update(format!("metric={metric}\n").as_bytes());
        if metric == Metric::Ssim {
            h.update(
                format!(
                    "ssim={},{:016x},{:016x},{:016x}\n",
                    ssim.window_side,
                    ssim.gaussian_sigma.to_bits(),
                    ssim.c1.to_bits(),
                    ssim.c2.to_bits()
                )
                .as_bytes(),
            );
        }
        hex::encode(&h.finalize()[..16])
    }
}

pub fn cache_key(
    manifest: &Manifest,
    cfg: &PreprocessConfig,
    metric: Metric,
    ssim: &SsimParams,
) -> Result<String, DatasetError> {
    Ok(Fingerprint::compute(manifest)?.cache_key(cfg, metric, ssim))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_rules() {
        assert!(is_valid_id("img_001.a-b"));
        for bad in ["", "a,b", "a b", "a\"b", "a\nb"] {
            assert!(!is_valid_id(bad), "{bad:?}");
        }
    }

    #[test]
    fn manifest_json_shape() {
        let text = r#"{"version":"1","entries":[
            {"id":"a","image_path":"i/a.png","mask_path":"m/a.png","split":"train"},
            {"id":"b","image_path":"/abs/b.png","mask_path":"m/b.png","split":"test"}]}"#;
        let mut m: Manifest = serde_json::from_str(text).unwrap();
        m.root = PathBuf::from("/data");
        assert_eq!(m.count(Split::Train), 1);
        assert_eq!(m.resolve(&m.entries[0].image_path), PathBuf::from("/data/i/a.png"));
        assert_eq!(m.resolve(&m.entries[1].image_path), PathBuf::from("/abs/b.png"));
        let issues = m.issues();
        assert_eq!(issues.len(), 4, "all four files are missing: {issues:?}");
    }

    #[test]
    fn example_dims_checked() {
        let img = RasterImage::filled(4, 4, [0.0; 3]).unwrap();
        let mask = BinaryMask::new(3, 4, vec![false; 12]).unwrap();
        assert!(matches!(LabeledExample::new("x", img, mask), Err(DatasetError::DimensionMismatch { .. })));
    }
}
