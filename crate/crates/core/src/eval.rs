//! IoU scoring, single-configuration evaluation and the k × metric sweep.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{binarize, BackendError, BackendSpec, Segmenter, SoftMask};
use crate::dataset::{Dataset, DatasetError, LabeledExample};
use crate::imaging::{to_grayscale, BinaryMask, GrayImage, PreprocessConfig, RasterImage};
use crate::parallel::with_workers;
use crate::prompt::LAYOUT_VERSION;
use crate::similarity::{
    build_distance_matrix, knn_retrieve, DistanceMatrix, Metric, RetrievalResult, SimilarityError, SsimParams,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("no records to average")]
    EmptyRecordList,
    #[error("k = {k} exceeds the {train} training examples")]
    KTooLarge { k: usize, train: usize },
    #[error("invalid k range {min}..={max}")]
    InvalidRange { min: usize, max: usize },
    #[error("no metrics requested")]
    NoMetrics,
    #[error("distance matrix does not match the dataset: {0}")]
    MatrixMismatch(String),
    #[error("test {test_id:?}: {source}")]
    Test {
        test_id: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl EvalError {
    pub fn in_test(self, test_id: &str) -> Self {
        EvalError::Test { test_id: test_id.to_string(), source: Box::new(self) }
    }

    /// The innermost backend error, if this failure came from a segmenter.
    pub fn backend(&self) -> Option<&BackendError> {
        match self {
            EvalError::Backend(b) => Some(b),
            EvalError::Test { source, .. } => source.backend(),
            _ => None,
        }
    }
}

/// Foreground intersection over union. Two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, EvalError> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(EvalError::DimensionMismatch(pred.width(), pred.height(), gt.width(), gt.height()));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoURecord {
    pub test_id: String,
    pub iou: f64,
    pub k: usize,
    pub metric: Metric,
    pub backend: String,
}

/// Mean IoU. Values are summed in sorted order so the result does not depend
/// on record order.
pub fn miou(records: &[IoURecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecordList);
    }
    let mut values: Vec<f64> = records.iter().map(|r| r.iou).collect();
    values.sort_by(f64::total_cmp);
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub ssim: SsimParams,
    pub threshold: f64,
    /// Worker threads; 0 uses the global pool.
    pub parallelism: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { ssim: SsimParams::default(), threshold: crate::backends::DEFAULT_THRESHOLD, parallelism: 0 }
    }
}

pub fn grayscale_pairs(examples: &[LabeledExample]) -> Vec<(&str, GrayImage)> {
    examples.par_iter().map(|e| (e.id.as_str(), to_grayscale(&e.image))).collect()
}

/// Distance matrix between the test and train splits.
pub fn compute_distance_matrix(
    dataset: &Dataset,
    metric: Metric,
    settings: &EvalSettings,
) -> Result<DistanceMatrix, EvalError> {
    dataset.require_splits()?;
    let (tests, train) =
        with_workers(settings.parallelism, || (grayscale_pairs(&dataset.test), grayscale_pairs(&dataset.train)));
    Ok(build_distance_matrix(&tests, &train, metric, &settings.ssim, settings.parallelism)?)
}

fn check_matrix(dataset: &Dataset, m: &DistanceMatrix, metric: Metric) -> Result<(), EvalError> {
    if m.metric != metric {
        return Err(EvalError::MatrixMismatch(format!("matrix is {}, wanted {metric}", m.metric)));
    }
    let ids = |v: &[LabeledExample]| v.iter().map(|e| e.id.clone()).collect::<Vec<_>>();
    if m.test_ids != ids(&dataset.test) || m.train_ids != ids(&dataset.train) {
        return Err(EvalError::MatrixMismatch("id lists differ".into()));
    }
    Ok(())
}

/// Retrieved exemplars in rank order.
pub fn exemplars_for<'a>(train: &'a [LabeledExample], retrieval: &RetrievalResult) -> Vec<LabeledExample> {
    let by_id: HashMap<&str, &'a LabeledExample> = train.iter().map(|e| (e.id.as_str(), e)).collect();
    retrieval.ids().map(|id| by_id[id].clone()).collect()
}

/// Retrieves `k` exemplars for one test image and segments it.
pub fn predict_one(
    train: &[LabeledExample],
    test_id: &str,
    test: &RasterImage,
    k: usize,
    metric: Metric,
    ssim: &SsimParams,
    backend: &dyn Segmenter,
) -> Result<(RetrievalResult, SoftMask), EvalError> {
    let pool = grayscale_pairs(train);
    let retrieval = knn_retrieve(test_id, &to_grayscale(test), &pool, k, metric, ssim)?;
    let soft = backend.segment(&exemplars_for(train, &retrieval), test)?;
    Ok((retrieval, soft))
}

/// Scores every test image at one `(k, metric)` setting. Records are sorted
/// by test id.
pub fn evaluate_once(
    dataset: &Dataset,
    k: usize,
    metric: Metric,
    backend: &dyn Segmenter,
    settings: &EvalSettings,
    distances: Option<&DistanceMatrix>,
) -> Result<Vec<IoURecord>, EvalError> {
    dataset.require_splits()?;
    if k == 0 || k > dataset.train.len() {
        return Err(EvalError::KTooLarge { k, train: dataset.train.len() });
    }
    let owned;
    let matrix = match distances {
        Some(m) => {
            check_matrix(dataset, m, metric)?;
            m
        }
        None => {
            owned = compute_distance_matrix(dataset, metric, settings)?;
            &owned
        }
    };
    let score = |test: &LabeledExample| -> Result<IoURecord, EvalError> {
        let retrieval = matrix.retrieve(&test.id, k)?;
        let soft = backend.segment(&exemplars_for(&dataset.train, &retrieval), &test.image)?;
        Ok(IoURecord {
            test_id: test.id.clone(),
            iou: iou(&binarize(&soft, settings.threshold), &test.mask)?,
            k,
            metric,
            backend: backend.tag().to_string(),
        })
    };
    with_workers(settings.parallelism, || {
        dataset
            .test
            .par_iter()
            .map(|t| score(t).map_err(|e| e.in_test(&t.id)))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub metrics: Vec<Metric>,
    pub backend: BackendSpec,
    pub preprocess: PreprocessConfig,
    pub ssim: SsimParams,
    pub threshold: f64,
    pub layout_version: String,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k_min: 1,
            k_max: 15,
            metrics: Metric::ALL.to_vec(),
            backend: BackendSpec::default(),
            preprocess: PreprocessConfig::default(),
            ssim: SsimParams::default(),
            threshold: crate::backends::DEFAULT_THRESHOLD,
            layout_version: LAYOUT_VERSION.to_string(),
        }
    }
}

impl SweepConfig {
    /// Metrics deduplicated in canonical order.
    pub fn canonical_metrics(&self) -> Vec<Metric> {
        self.metrics.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Checks the grid against the training split before any work is done.
    pub fn validate(&self, train_len: usize) -> Result<(), EvalError> {
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(EvalError::InvalidRange { min: self.k_min, max: self.k_max });
        }
        if self.metrics.is_empty() {
            return Err(EvalError::NoMetrics);
        }
        if self.k_max > train_len {
            return Err(EvalError::KTooLarge { k: self.k_max, train: train_len });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k: usize,
    pub metric: Metric,
    /// `None` when the cell failed.
    pub miou: Option<f64>,
    pub n_images: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub cells: Vec<SweepCell>,
    pub records: Vec<IoURecord>,
}

impl SweepReport {
    pub fn failed_cells(&self) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(|c| c.error.is_some())
    }

    pub fn cell(&self, k: usize, metric: Metric) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.k == k && c.metric == metric)
    }
}

/// Evaluates every `(k, metric)` cell. Distance matrices are computed once per
/// metric unless supplied in `precomputed`. A failing cell is recorded with
/// its error and the sweep moves on.
pub fn sweep(
    dataset: &Dataset,
    config: &SweepConfig,
    settings: &EvalSettings,
    precomputed: &BTreeMap<Metric, DistanceMatrix>,
) -> Result<SweepReport, EvalError> {
    dataset.require_splits()?;
    config.validate(dataset.train.len())?;
    let backend = config.backend.build()?;
    let settings = EvalSettings { ssim: config.ssim, threshold: config.threshold, ..*settings };
    let metrics = config.canonical_metrics();

    let mut matrices = BTreeMap::new();
    for &metric in &metrics {
        let m = match precomputed.get(&metric) {
            Some(m) => {
                check_matrix(dataset, m, metric)?;
                m.clone()
            }
            None => compute_distance_matrix(dataset, metric, &settings)?,
        };
        matrices.insert(metric, m);
    }

    let mut cells = Vec::new();
    let mut records = Vec::new();
    for k in config.k_min..=config.k_max {
        for &metric in &metrics {
            match evaluate_once(dataset, k, metric, backend.as_ref(), &settings, Some(&matrices[&metric])) {
                Ok(rs) => {
                    let m = miou(&rs)?;
                    log::info!("k={k} metric={metric}: mIoU {m:.4} over {} images", rs.len());
                    cells.push(SweepCell { k, metric, miou: Some(m), n_images: rs.len(), error: None });
                    records.extend(rs);
                }
                Err(e) => {
                    log::warn!("k={k} metric={metric} failed: {e}");
                    cells.push(SweepCell { k, metric, miou: None, n_images: 0, error: Some(e.to_string()) });
                }
            }
        }
    }
    Ok(SweepReport { config: config.clone(), cells, records })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format {other:?} (expected csv or json)")),
        }
    }
}

pub const CSV_HEADER: &str = "k,metric,miou,n_images,miou_100";

/// CSV: one row per cell with mIoU on both the 0–1 and 0–100 scales (empty
/// for failed cells). JSON: the full report.
pub fn emit_report(report: &SweepReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for c in &report.cells {
                let (unit, pct) = match c.miou {
                    Some(m) => (format!("{m:.6}"), format!("{:.6}", m * 100.0)),
                    None => (String::new(), String::new()),
                };
                out.push_str(&format!("{},{},{unit},{},{pct}\n", c.k, c.metric, c.n_images));
            }
            out.into_bytes()
        }
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report).expect("report serializes");
            out.push(b'\n');
            out
        }
    }
}

/// `sweep_<dataset hash>_<backend>_<layout>.<ext>`
pub fn report_file_name(dataset_hash: &str, backend_tag: &str, layout_version: &str, format: ReportFormat) -> String {
    format!("sweep_{dataset_hash}_{backend_tag}_{layout_version}.{}", format.extension())
}
