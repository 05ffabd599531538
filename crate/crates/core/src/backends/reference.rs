//! Nonparametric mask transfer by exact nearest-patch search.
//!
//! For every test patch center on a stride grid, the exemplar patch with the
//! smallest grayscale sum of squared differences is found by exhaustive
//! search over every exemplar and every fully-contained position. Ties are
//! broken by exemplar rank, then by squared spatial offset from the query
//! center, then by row-major position. The matched exemplar's mask is then
//! transferred onto the test grid.
//!
//! The search is exact. Candidates are projected onto a few orthonormal
//! low-frequency DCT patch basis vectors; by Bessel's inequality the projected
//! distance is a lower bound on the SSD, so a kd-tree search over the
//! projections that skips any cell whose bound exceeds the current best
//! visits every possible winner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BackendError, Segmenter, SoftMask};
use crate::dataset::LabeledExample;
use crate::imaging::{to_grayscale, BinaryMask, GrayImage, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Every matched patch votes the exemplar mask values it covers onto
    /// every pixel of the test patch; confidence is the foreground share.
    PatchVote,
    /// Each grid center votes the mask value at its matched center; pixels
    /// take the vote of the nearest grid center.
    CenterVote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMatchParams {
    pub patch_side: usize,
    pub stride: usize,
    pub aggregation: Aggregation,
}

impl Default for PatchMatchParams {
    fn default() -> Self {
        Self { patch_side: 7, stride: 2, aggregation: Aggregation::PatchVote }
    }
}

impl PatchMatchParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.patch_side < 3 || self.patch_side % 2 == 0 {
            return Err(BackendError::InvalidParams(format!(
                "patch_side must be odd and >= 3, got {}",
                self.patch_side
            )));
        }
        if self.stride == 0 {
            return Err(BackendError::InvalidParams("stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Patch centers along one axis: every `stride` from the first valid center,
/// plus the last valid center so the patches cover the whole axis.
pub(crate) fn grid_centers(len: usize, patch_side: usize, stride: usize) -> Vec<usize> {
    let r = patch_side / 2;
    let last = len - 1 - r;
    let mut centers: Vec<usize> = (r..=last).step_by(stride).collect();
    if centers.last() != Some(&last) {
        centers.push(last);
    }
    centers
}

/// Number of projection coefficients kept per patch.
const DIMS: usize = 8;
// (horizontal, vertical) DCT frequencies, lowest first.
const FREQS: [(usize, usize); DIMS] = [(0, 0), (1, 0), (0, 1), (1, 1), (2, 0), (0, 2), (2, 1), (1, 2)];
const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, Copy)]
struct Candidate {
    coeffs: [f64; DIMS],
    exemplar: u32,
    // row-major center index
    pos: u32,
}

/// Orthonormal 2-D DCT-II patch basis, truncated to [`FREQS`].
struct Basis {
    side: usize,
    // one row of DIMS weights per patch pixel, row-major
    weights: Vec<[f64; DIMS]>,
}

impl Basis {
    fn new(side: usize) -> Self {
        let n = side as f64;
        let dct = |u: usize, i: usize| {
            if u == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt() * (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64 / (2.0 * n)).cos()
            }
        };
        let mut weights = Vec::with_capacity(side * side);
        for dy in 0..side {
            for dx in 0..side {
                weights.push(FREQS.map(|(u, v)| dct(u, dx) * dct(v, dy)));
            }
        }
        Self { side, weights }
    }

    fn project(&self, img: &GrayImage, cx: usize, cy: usize) -> [f64; DIMS] {
        let r = self.side / 2;
        let mut acc = [0.0; DIMS];
        for dy in 0..self.side {
            let row = &img.pixels()[(cy + dy - r) * img.width() + cx - r..][..self.side];
            for (&v, w) in row.iter().zip(&self.weights[dy * self.side..]) {
                for k in 0..DIMS {
                    acc[k] += v * w[k];
                }
            }
        }
        acc
    }
}

fn dist2(a: &[f64; DIMS], b: &[f64; DIMS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared differences in row-major patch order, abandoned once it
/// strictly exceeds `limit`. Returns `None` when abandoned.
fn patch_ssd(
    a: &GrayImage,
    (ax, ay): (usize, usize),
    b: &GrayImage,
    (bx, by): (usize, usize),
    side: usize,
    limit: f64,
) -> Option<f64> {
    let r = side / 2;
    let mut s = 0.0;
    for dy in 0..side {
        let ra = &a.pixels()[(ay + dy - r) * a.width() + ax - r..][..side];
        let rb = &b.pixels()[(by + dy - r) * b.width() + bx - r..][..side];
        for (x, y) in ra.iter().zip(rb) {
            let d = x - y;
            s += d * d;
        }
        if s > limit {
            return None;
        }
    }
    Some(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Match {
    ssd: f64,
    exemplar: u32,
    offset2: u64,
    pos: u32,
}

impl Match {
    fn beats(&self, other: &Match) -> bool {
        (self.ssd, self.exemplar, self.offset2, self.pos)
            .partial_cmp(&(other.ssd, other.exemplar, other.offset2, other.pos))
            .is_some_and(|o| o.is_lt())
    }
}

// Slack on the lower bound for rounding in the projections.
fn prune_limit(best: f64) -> f64 {
    best + best * 1e-9 + 1e-12
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf { start: u32, end: u32 },
    // Points in `left` have coordinate <= value on `dim`, points in `right` >= value.
    Split { dim: u8, value: f64, left: u32, right: u32 },
}

/// kd-tree over the projected coefficients of every exemplar patch.
struct PatchIndex<'a> {
    grays: &'a [GrayImage],
    basis: Basis,
    points: Vec<Candidate>,
    nodes: Vec<Node>,
    width: usize,
}

impl<'a> PatchIndex<'a> {
    fn build(grays: &'a [GrayImage], side: usize) -> Self {
        let basis = Basis::new(side);
        let r = side / 2;
        let (w, h) = (grays[0].width(), grays[0].height());
        let mut points: Vec<Candidate> = grays
            .par_iter()
            .enumerate()
            .flat_map_iter(|(e, img)| {
                let basis = &basis;
                (r..h - r).flat_map(move |cy| {
                    (r..w - r).map(move |cx| Candidate {
                        coeffs: basis.project(img, cx, cy),
                        exemplar: e as u32,
                        pos: (cy * w + cx) as u32,
                    })
                })
            })
            .collect();
        let mut nodes = Vec::new();
        let n = points.len();
        build_node(&mut points, 0, n, &mut nodes);
        Self { grays, basis, points, nodes, width: w }
    }

    fn evaluate(&self, test: &GrayImage, q: (usize, usize), c: &Candidate, best: &mut Option<Match>) {
        let (px, py) = ((c.pos as usize) % self.width, (c.pos as usize) / self.width);
        let limit = best.map_or(f64::INFINITY, |b| b.ssd);
        let Some(ssd) = patch_ssd(test, q, &self.grays[c.exemplar as usize], (px, py), self.basis.side, limit)
        else {
            return;
        };
        let dx = px.abs_diff(q.0) as u64;
        let dy = py.abs_diff(q.1) as u64;
        let m = Match { ssd, exemplar: c.exemplar, offset2: dx * dx + dy * dy, pos: c.pos };
        if best.is_none_or(|b| m.beats(&b)) {
            *best = Some(m);
        }
    }

    fn search(&self, test: &GrayImage, q: (usize, usize), qc: &[f64; DIMS], node: usize, off: &mut [f64; DIMS], rd: f64, best: &mut Option<Match>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for c in &self.points[start as usize..end as usize] {
                    if dist2(&c.coeffs, qc) <= prune_limit(best.map_or(f64::INFINITY, |b| b.ssd)) {
                        self.evaluate(test, q, c, best);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let d = dim as usize;
                let diff = qc[d] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(test, q, qc, near as usize, off, rd, best);
                let old = off[d];
                let far_rd = rd - old * old + diff * diff;
                if far_rd <= prune_limit(best.map_or(f64::INFINITY, |b| b.ssd)) {
                    off[d] = diff;
                    self.search(test, q, qc, far as usize, off, far_rd, best);
                    off[d] = old;
                }
            }
        }
    }

    fn nearest(&self, test: &GrayImage, q: (usize, usize)) -> Match {
        let qc = self.basis.project(test, q.0, q.1);
        let mut best = None;
        // Seed with the co-located patch of the top-ranked exemplar.
        let seed = Candidate { coeffs: qc, exemplar: 0, pos: (q.1 * self.width + q.0) as u32 };
        self.evaluate(test, q, &seed, &mut best);
        self.search(test, q, &qc, 0, &mut [0.0; DIMS], 0.0, &mut best);
        best.expect("index holds at least one candidate")
    }
}

/// Builds the subtree over `points[start..end]` and returns its node index.
fn build_node(points: &mut [Candidate], start: usize, end: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len();
    nodes.push(Node::Leaf { start: start as u32, end: end as u32 });
    if end - start <= LEAF_SIZE {
        return id as u32;
    }
    let slice = &mut points[start..end];
    let mut lo = [f64::INFINITY; DIMS];
    let mut hi = [f64::NEG_INFINITY; DIMS];
    for c in slice.iter() {
        for k in 0..DIMS {
            lo[k] = lo[k].min(c.coeffs[k]);
            hi[k] = hi[k].max(c.coeffs[k]);
        }
    }
    let dim = (0..DIMS).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap_or(0);
    if hi[dim] <= lo[dim] {
        return id as u32;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |a, b| {
        a.coeffs[dim].total_cmp(&b.coeffs[dim]).then(a.exemplar.cmp(&b.exemplar)).then(a.pos.cmp(&b.pos))
    });
    let value = slice[mid].coeffs[dim];
    let left = build_node(points, start, start + mid, nodes);
    let right = build_node(points, start + mid, end, nodes);
    nodes[id] = Node::Split { dim: dim as u8, value, left, right };
    id as u32
}

fn validate_inputs(exemplars: &[LabeledExample], test: &RasterImage, params: &PatchMatchParams) -> Result<(), BackendError> {
    params.validate()?;
    if exemplars.is_empty() {
        return Err(BackendError::EmptyExemplarList);
    }
    let (w, h) = (test.width(), test.height());
    if w < params.patch_side || h < params.patch_side {
        return Err(BackendError::PatchLargerThanImage { patch: params.patch_side, width: w, height: h });
    }
    for ex in exemplars {
        let dims = [ex.image.width(), ex.image.height(), ex.mask.width(), ex.mask.height()];
        if dims != [w, h, w, h] {
            return Err(BackendError::DimensionMismatch(format!(
                "exemplar {:?} is {}x{} (mask {}x{}), test is {w}x{h}",
                ex.id, dims[0], dims[1], dims[2], dims[3]
            )));
        }
    }
    Ok(())
}

/// Predicts a soft mask for `test` by transferring exemplar mask values
/// through exact nearest-patch matches.
pub fn reference_patchmatch(
    exemplars: &[LabeledExample],
    test: &RasterImage,
    params: &PatchMatchParams,
) -> Result<SoftMask, BackendError> {
    validate_inputs(exemplars, test, params)?;
    let (w, h) = (test.width(), test.height());
    let side = params.patch_side;
    let r = side / 2;
    let grays: Vec<GrayImage> = exemplars.iter().map(|e| to_grayscale(&e.image)).collect();
    let test_gray = to_grayscale(test);
    let index = PatchIndex::build(&grays, side);

    let xs = grid_centers(w, side, params.stride);
    let ys = grid_centers(h, side, params.stride);
    let matches: Vec<Vec<Match>> = ys
        .par_iter()
        .map(|&qy| xs.iter().map(|&qx| index.nearest(&test_gray, (qx, qy))).collect())
        .collect();

    let masks: Vec<&BinaryMask> = exemplars.iter().map(|e| &e.mask).collect();
    let values = match params.aggregation {
        Aggregation::PatchVote => {
            let mut fg = vec![0u32; w * h];
            let mut total = vec![0u32; w * h];
            for (&qy, row) in ys.iter().zip(&matches) {
                for (&qx, m) in xs.iter().zip(row) {
                    let mask = masks[m.exemplar as usize];
                    let (mx, my) = (m.pos as usize % w, m.pos as usize / w);
                    for dy in 0..side {
                        for dx in 0..side {
                            let i = (qy + dy - r) * w + qx + dx - r;
                            total[i] += 1;
                            fg[i] += mask.get(mx + dx - r, my + dy - r) as u32;
                        }
                    }
                }
            }
            fg.iter().zip(&total).map(|(&f, &t)| (f as f64 / t as f64) as f32).collect()
        }
        Aggregation::CenterVote => {
            let nearest = |centers: &[usize], v: usize| {
                let i = centers.partition_point(|&c| c < v);
                match (i.checked_sub(1), centers.get(i)) {
                    (Some(a), Some(&b)) if v - centers[a] <= b - v => a,
                    (_, Some(_)) => i,
                    (Some(a), None) => a,
                    (None, None) => unreachable!("grid is never empty"),
                }
            };
            let col: Vec<usize> = (0..w).map(|x| nearest(&xs, x)).collect();
            let mut values = Vec::with_capacity(w * h);
            for y in 0..h {
                let row = &matches[nearest(&ys, y)];
                for &cx in &col {
                    let m = row[cx];
                    let mask = masks[m.exemplar as usize];
                    values.push(mask.get(m.pos as usize % w, m.pos as usize / w) as u8 as f32);
                }
            }
            values
        }
    };
    SoftMask::new(w, h, values)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceBackend {
    params: PatchMatchParams,
}

impl ReferenceBackend {
    pub fn new(params: PatchMatchParams) -> Self {
        Self { params }
    }
}

impl Segmenter for ReferenceBackend {
    fn tag(&self) -> &'static str {
        "reference"
    }

    fn segment(&self, exemplars: &[LabeledExample], test: &RasterImage) -> Result<SoftMask, BackendError> {
        reference_patchmatch(exemplars, test, &self.params)
    }
}
