//! Independent reference implementations used to check the library.
//!
//! Nothing here calls into the code under test except for plain data
//! accessors, so an agreement between the two is meaningful.
#![allow(dead_code)]

use promptseg_core::{BinaryMask, GrayImage};

/// Square root of the plain sum of squared differences.
pub fn frobenius(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

/// Windowed SSIM written directly from the definition: a full 2-D Gaussian
/// window at every fully-contained position, two-pass moments, mean of the
/// per-window index.
pub fn ssim(a: &GrayImage, b: &GrayImage, window: usize, sigma: f64, range: f64) -> f64 {
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let r = (window / 2) as f64;
    let mut w2 = vec![0.0; window * window];
    let mut total = 0.0;
    for j in 0..window {
        for i in 0..window {
            let d2 = (i as f64 - r).powi(2) + (j as f64 - r).powi(2);
            w2[j * window + i] = (-d2 / (2.0 * sigma * sigma)).exp();
            total += w2[j * window + i];
        }
    }
    for v in &mut w2 {
        *v /= total;
    }

    let (w, h) = (a.width(), a.height());
    let mut acc = 0.0;
    let mut n = 0usize;
    for y0 in 0..=h - window {
        for x0 in 0..=w - window {
            let at = |img: &GrayImage, i: usize, j: usize| img.pixels()[(y0 + j) * w + x0 + i];
            let (mut ma, mut mb) = (0.0, 0.0);
            for j in 0..window {
                for i in 0..window {
                    ma += w2[j * window + i] * at(a, i, j);
                    mb += w2[j * window + i] * at(b, i, j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for j in 0..window {
                for i in 0..window {
                    let (da, db) = (at(a, i, j) - ma, at(b, i, j) - mb);
                    va += w2[j * window + i] * da * da;
                    vb += w2[j * window + i] * db * db;
                    cov += w2[j * window + i] * da * db;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    acc / n as f64
}

/// IoU by counting pixels with integers.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, g) in pred.bits().iter().zip(gt.bits()) {
        if *p && *g {
            inter += 1;
        }
        if *p || *g {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Sorts every candidate by `(distance, id)` and keeps `k`.
pub fn knn(distances: &[(String, f64)], k: usize) -> Vec<(String, f64)> {
    let mut all = distances.to_vec();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// BT.601 luma, from raw interleaved RGB.
pub fn luma(rgb: &[f32]) -> Vec<f64> {
    rgb.chunks(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Centers `r, r+stride, ...` plus the last valid one.
pub fn grid(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let r = patch / 2;
    let mut out = Vec::new();
    let mut c = r;
    while c + r < len {
        out.push(c);
        c += stride;
    }
    if *out.last().unwrap() != len - 1 - r {
        out.push(len - 1 - r);
    }
    out
}

/// Exhaustive nearest-patch mask transfer with patch voting. `grays` are the
/// exemplar luma planes in rank order. Sums run in row-major patch order.
pub fn patch_vote(
    grays: &[Vec<f64>],
    masks: &[&BinaryMask],
    test: &[f64],
    side: usize,
    patch: usize,
    stride: usize,
) -> Vec<f32> {
    let r = patch / 2;
    let centers = grid(side, patch, stride);
    let mut fg = vec![0u32; side * side];
    let mut total = vec![0u32; side * side];
    for &qy in &centers {
        for &qx in &centers {
            // (ssd, exemplar, offset², row-major position)
            let mut best: Option<(f64, usize, usize, usize)> = None;
            for (e, g) in grays.iter().enumerate() {
                for py in r..side - r {
                    for px in r..side - r {
                        let mut ssd = 0.0;
                        for dy in 0..patch {
                            for dx in 0..patch {
                                let d = test[(qy + dy - r) * side + qx + dx - r] - g[(py + dy - r) * side + px + dx - r];
                                ssd += d * d;
                            }
                        }
                        let off = px.abs_diff(qx).pow(2) + py.abs_diff(qy).pow(2);
                        let cand = (ssd, e, off, py * side + px);
                        if best.is_none_or(|b| cand.partial_cmp(&b).unwrap().is_lt()) {
                            best = Some(cand);
                        }
                    }
                }
            }
            let (_, e, _, pos) = best.unwrap();
            let (mx, my) = (pos % side, pos / side);
            for dy in 0..patch {
                for dx in 0..patch {
                    let i = (qy + dy - r) * side + qx + dx - r;
                    total[i] += 1;
                    if masks[e].get(mx + dx - r, my + dy - r) {
                        fg[i] += 1;
                    }
                }
            }
        }
    }
    fg.iter().zip(&total).map(|(&f, &t)| (f as f64 / t as f64) as f32).collect()
}
