//! Image distances and k-nearest-neighbor exemplar retrieval.
//!
//! Distances are computed on grayscale images at the preprocessing
//! resolution. Two metrics are supported: the Frobenius norm of the pixel
//! difference, and `1 - mean SSIM` over all valid (unpadded) Gaussian windows.

use std::borrow::Borrow;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::GrayImage;
use crate::parallel::with_workers;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall { width: usize, height: usize, window: usize },
    #[error("invalid SSIM parameters: {0}")]
    InvalidParams(String),
    #[error("k = {k} exceeds pool size {pool}")]
    KTooLarge { k: usize, pool: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("exemplar pool is empty")]
    EmptyPool,
    #[error("duplicate exemplar id {0:?}")]
    DuplicateId(String),
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("malformed distance matrix csv: {0}")]
    MatrixFormat(String),
}

/// Distance metric used for retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Frobenius,
    Ssim,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Frobenius, Metric::Ssim];

    pub fn tag(self) -> &'static str {
        match self {
            Metric::Frobenius => "frobenius",
            Metric::Ssim => "ssim",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "frobenius" => Ok(Metric::Frobenius),
            "ssim" => Ok(Metric::Ssim),
            other => Err(format!("unknown metric {other:?} (expected frobenius or ssim)")),
        }
    }
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window_side: usize,
    pub gaussian_sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::for_range(1.0)
    }
}

impl SsimParams {
    /// 11×11 window, σ = 1.5, `c1 = (0.01 L)²`, `c2 = (0.03 L)²`.
    pub fn for_range(dynamic_range: f64) -> Self {
        Self {
            window_side: 11,
            gaussian_sigma: 1.5,
            c1: (SSIM_K1 * dynamic_range).powi(2),
            c2: (SSIM_K2 * dynamic_range).powi(2),
            dynamic_range,
        }
    }

    pub fn validate(&self) -> Result<(), SimilarityError> {
        if self.window_side < 3 || self.window_side % 2 == 0 {
            return Err(SimilarityError::InvalidParams(format!(
                "window_side must be odd and >= 3, got {}",
                self.window_side
            )));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(SimilarityError::InvalidParams("gaussian_sigma must be positive".into()));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(SimilarityError::InvalidParams("c1 and c2 must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window(side: usize, sigma: f64) -> Vec<f64> {
    let center = (side / 2) as f64;
    let raw: Vec<f64> = (0..side)
        .map(|i| {
            let d = i as f64 - center;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn check_same_dims(a: &GrayImage, b: &GrayImage) -> Result<(), SimilarityError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(SimilarityError::DimensionMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    Ok(())
}

/// `sqrt(Σ (a - b)²)` over all pixels.
pub fn frobenius_distance(a: &GrayImage, b: &GrayImage) -> Result<f64, SimilarityError> {
    check_same_dims(a, b)?;
    let ss: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum();
    Ok(ss.sqrt())
}

/// Gaussian-filtered maps over the valid window grid.
struct Blur<'a> {
    taps: &'a [f64],
    width: usize,
    height: usize,
}

impl Blur<'_> {
    fn out_dims(&self) -> (usize, usize) {
        let n = self.taps.len();
        (self.width - n + 1, self.height - n + 1)
    }

    /// Separable valid-mode filtering of `src` (row-major, `width`×`height`).
    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let n = self.taps.len();
        let (ow, oh) = self.out_dims();
        let mut horiz = vec![0.0; ow * self.height];
        for y in 0..self.height {
            let row = &src[y * self.width..(y + 1) * self.width];
            let out = &mut horiz[y * ow..(y + 1) * ow];
            for (x, o) in out.iter_mut().enumerate() {
                *o = self.taps.iter().zip(&row[x..x + n]).map(|(t, v)| t * v).sum();
            }
        }
        let mut out = vec![0.0; ow * oh];
        for y in 0..oh {
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (i, t) in self.taps.iter().enumerate() {
                let src_row = &horiz[(y + i) * ow..(y + i + 1) * ow];
                for (d, s) in dst.iter_mut().zip(src_row) {
                    *d += t * s;
                }
            }
        }
        out
    }
}

/// Per-image local means and second moments, reusable across pairings.
pub struct SsimStats<'a> {
    image: &'a GrayImage,
    mean: Vec<f64>,
    second_moment: Vec<f64>,
}

/// SSIM evaluator with a fixed window.
pub struct Ssim {
    params: SsimParams,
    taps: Vec<f64>,
}

impl Ssim {
    pub fn new(params: SsimParams) -> Result<Self, SimilarityError> {
        params.validate()?;
        Ok(Self { taps: gaussian_window(params.window_side, params.gaussian_sigma), params })
    }

    fn blur(&self, img: &GrayImage) -> Blur<'_> {
        Blur { taps: &self.taps, width: img.width(), height: img.height() }
    }

    pub fn prepare<'a>(&self, img: &'a GrayImage) -> Result<SsimStats<'a>, SimilarityError> {
        let n = self.params.window_side;
        if img.width() < n || img.height() < n {
            return Err(SimilarityError::ImageTooSmall {
                width: img.width(),
                height: img.height(),
                window: n,
            });
        }
        let blur = self.blur(img);
        let squares: Vec<f64> = img.pixels().iter().map(|v| v * v).collect();
        Ok(SsimStats { image: img, mean: blur.apply(img.pixels()), second_moment: blur.apply(&squares) })
    }

    /// Mean SSIM over all valid window positions.
    pub fn compare(&self, a: &SsimStats<'_>, b: &SsimStats<'_>) -> Result<f64, SimilarityError> {
        check_same_dims(a.image, b.image)?;
        let products: Vec<f64> =
            a.image.pixels().iter().zip(b.image.pixels()).map(|(x, y)| x * y).collect();
        let cross = self.blur(a.image).apply(&products);
        let (c1, c2) = (self.params.c1, self.params.c2);
        let mut total = 0.0;
        for i in 0..cross.len() {
            let (ma, mb) = (a.mean[i], b.mean[i]);
            let va = a.second_moment[i] - ma * ma;
            let vb = b.second_moment[i] - mb * mb;
            let cov = cross[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
        }
        Ok(total / cross.len() as f64)
    }
}

pub fn ssim(a: &GrayImage, b: &GrayImage, params: &SsimParams) -> Result<f64, SimilarityError> {
    check_same_dims(a, b)?;
    let s = Ssim::new(*params)?;
    s.compare(&s.prepare(a)?, &s.prepare(b)?)
}

/// `1 - ssim`, in `[0, 2]`.
pub fn ssim_distance(a: &GrayImage, b: &GrayImage, params: &SsimParams) -> Result<f64, SimilarityError> {
    Ok(1.0 - ssim(a, b, params)?)
}

pub fn distance(
    a: &GrayImage,
    b: &GrayImage,
    metric: Metric,
    params: &SsimParams,
) -> Result<f64, SimilarityError> {
    match metric {
        Metric::Frobenius => frobenius_distance(a, b),
        Metric::Ssim => ssim_distance(a, b, params),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
}

/// Ranked neighbors of one test image, nearest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub test_id: String,
    pub neighbors: Vec<Neighbor>,
}

impl RetrievalResult {
    pub fn k(&self) -> usize {
        self.neighbors.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.neighbors.iter().map(|n| n.id.as_str())
    }
}

/// Keeps the `k` smallest distances, ordered by `(distance, id)`.
pub fn rank_neighbors<'a>(
    test_id: &str,
    candidates: impl IntoIterator<Item = (&'a str, f64)>,
    k: usize,
) -> Result<RetrievalResult, SimilarityError> {
    let mut seen = HashSet::new();
    let mut all = Vec::new();
    for (id, distance) in candidates {
        if !seen.insert(id) {
            return Err(SimilarityError::DuplicateId(id.to_string()));
        }
        all.push((id, distance));
    }
    if all.is_empty() {
        return Err(SimilarityError::EmptyPool);
    }
    if k == 0 {
        return Err(SimilarityError::ZeroK);
    }
    if k > all.len() {
        return Err(SimilarityError::KTooLarge { k, pool: all.len() });
    }
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    Ok(RetrievalResult {
        test_id: test_id.to_string(),
        neighbors: all
            .into_iter()
            .take(k)
            .map(|(id, distance)| Neighbor { id: id.to_string(), distance })
            .collect(),
    })
}

/// Brute-force k-nearest-neighbor search of `test` against `pool`.
pub fn knn_retrieve<S, G>(
    test_id: &str,
    test: &GrayImage,
    pool: &[(S, G)],
    k: usize,
    metric: Metric,
    params: &SsimParams,
) -> Result<RetrievalResult, SimilarityError>
where
    S: AsRef<str>,
    G: Borrow<GrayImage>,
{
    if pool.is_empty() {
        return Err(SimilarityError::EmptyPool);
    }
    if k > pool.len() {
        return Err(SimilarityError::KTooLarge { k, pool: pool.len() });
    }
    let distances = match metric {
        Metric::Frobenius => pool
            .iter()
            .map(|(_, img)| frobenius_distance(test, img.borrow()))
            .collect::<Result<Vec<_>, _>>()?,
        Metric::Ssim => {
            let s = Ssim::new(*params)?;
            let t = s.prepare(test)?;
            pool.iter()
                .map(|(_, img)| {
                    check_same_dims(test, img.borrow())?;
                    Ok(1.0 - s.compare(&t, &s.prepare(img.borrow())?)?)
                })
                .collect::<Result<Vec<_>, SimilarityError>>()?
        }
    };
    rank_neighbors(test_id, pool.iter().map(|(id, _)| id.as_ref()).zip(distances), k)
}

/// Cached `|tests| × |train|` distances for one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub metric: Metric,
    pub test_ids: Vec<String>,
    pub train_ids: Vec<String>,
    /// Row-major, one row per test id.
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, test: usize, train: usize) -> f64 {
        self.values[test * self.train_ids.len() + train]
    }

    pub fn row(&self, test: usize) -> &[f64] {
        let n = self.train_ids.len();
        &self.values[test * n..(test + 1) * n]
    }

    pub fn test_index(&self, test_id: &str) -> Option<usize> {
        self.test_ids.iter().position(|t| t == test_id)
    }

    pub fn retrieve(&self, test_id: &str, k: usize) -> Result<RetrievalResult, SimilarityError> {
        let i = self.test_index(test_id).ok_or_else(|| SimilarityError::UnknownId(test_id.into()))?;
        rank_neighbors(
            test_id,
            self.train_ids.iter().map(String::as_str).zip(self.row(i).iter().copied()),
            k,
        )
    }

    /// Header `test_id,<train ids>` then one row per test id. Values use the
    /// shortest decimal form that parses back to the identical `f64`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("test_id");
        for id in &self.train_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.test_ids.iter().enumerate() {
            out.push_str(id);
            for v in self.row(i) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, metric: Metric) -> Result<Self, SimilarityError> {
        let bad = |m: String| SimilarityError::MatrixFormat(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("test_id") {
            return Err(bad("header must start with test_id".into()));
        }
        let train_ids: Vec<String> = cols.map(str::to_string).collect();
        let mut test_ids = Vec::new();
        let mut values = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let mut cells = line.split(',');
            test_ids.push(cells.next().unwrap_or_default().to_string());
            let before = values.len();
            for c in cells {
                let v: f64 = c.parse().map_err(|_| bad(format!("line {}: bad value {c:?}", n + 2)))?;
                if !v.is_finite() {
                    return Err(bad(format!("line {}: non-finite value", n + 2)));
                }
                values.push(v);
            }
            if values.len() - before != train_ids.len() {
                return Err(bad(format!("line {}: expected {} values", n + 2, train_ids.len())));
            }
        }
        Ok(Self { metric, test_ids, train_ids, values })
    }
}

/// All test×train distances. The result does not depend on `parallelism`.
pub fn build_distance_matrix<S, G>(
    tests: &[(S, G)],
    pool: &[(S, G)],
    metric: Metric,
    params: &SsimParams,
    parallelism: usize,
) -> Result<DistanceMatrix, SimilarityError>
where
    S: AsRef<str> + Sync,
    G: Borrow<GrayImage> + Sync,
{
    if pool.is_empty() {
        return Err(SimilarityError::EmptyPool);
    }
    let reference = pool[0].1.borrow();
    for (_, img) in tests.iter().chain(pool) {
        check_same_dims(reference, img.borrow())?;
    }
    let columns: Vec<Vec<f64>> = with_workers(parallelism, || match metric {
        Metric::Frobenius => pool
            .par_iter()
            .map(|(_, p)| {
                tests.iter().map(|(_, t)| frobenius_distance(t.borrow(), p.borrow())).collect()
            })
            .collect::<Result<Vec<_>, _>>(),
        Metric::Ssim => {
            let s = Ssim::new(*params)?;
            let prepared = tests
                .par_iter()
                .map(|(_, t)| s.prepare(t.borrow()))
                .collect::<Result<Vec<_>, _>>()?;
            pool.par_iter()
                .map(|(_, p)| {
                    let ps = s.prepare(p.borrow())?;
                    prepared.iter().map(|t| Ok(1.0 - s.compare(t, &ps)?)).collect()
                })
                .collect::<Result<Vec<_>, _>>()
        }
    })?;
    let mut values = Vec::with_capacity(tests.len() * pool.len());
    for i in 0..tests.len() {
        values.extend(columns.iter().map(|col| col[i]));
    }
    Ok(DistanceMatrix {
        metric,
        test_ids: tests.iter().map(|(id, _)| id.as_ref().to_string()).collect(),
        train_ids: pool.iter().map(|(id, _)| id.as_ref().to_string()).collect(),
        values,
    })
}
