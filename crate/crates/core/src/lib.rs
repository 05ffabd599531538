//! Retrieval-based visual prompting for few-shot segmentation.
//!
//! For each test image the `k` most similar training images are retrieved
//! (Frobenius or SSIM distance), stitched with their masks and the test image
//! into a prompt canvas, and handed to a segmenter backend that fills in the
//! missing mask. Predictions are scored with IoU and aggregated into mIoU
//! over a k × metric grid.

pub mod backends;
pub mod dataset;
pub mod eval;
pub mod imaging;
mod parallel;
pub mod prompt;
pub mod similarity;
pub mod synth;

pub use backends::{
    binarize, reference_patchmatch, remote_segment, segment, Aggregation, BackendError, BackendSpec,
    PatchMatchParams, ReferenceBackend, RemoteBackend, Segmenter, SoftMask,
};
pub use dataset::{
    cache_key, load_examples, load_manifest, Dataset, DatasetError, Fingerprint, LabeledExample, Manifest,
    ManifestEntry, Split,
};
pub use eval::{
    emit_report, evaluate_once, iou, miou, predict_one, sweep, EvalError, EvalSettings, IoURecord, ReportFormat,
    SweepCell, SweepConfig, SweepReport,
};
pub use imaging::{
    decode_image, decode_mask, encode_mask_png, encode_png, normalize_zscore, resize_bilinear, to_grayscale,
    BinaryMask, GrayImage, ImagingError, NormalizedImage, PreprocessConfig, RasterImage,
};
pub use parallel::{default_parallelism, with_workers};
pub use prompt::{build_prompt, extract_prediction_region, mask_to_panel, PromptCanvas, PromptError, LAYOUT_VERSION};
pub use similarity::{
    build_distance_matrix, frobenius_distance, knn_retrieve, ssim, ssim_distance, DistanceMatrix, Metric,
    RetrievalResult, SimilarityError, SsimParams,
};
