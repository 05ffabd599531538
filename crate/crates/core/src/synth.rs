//! Seeded synthetic lesion datasets for benchmarks and end-to-end tests.
//!
//! Train images are textured skin-toned backgrounds with one elliptical
//! "lesion" of a different hue; the mask is the ellipse. Each test image is a
//! copy of a distinct train image plus per-channel Gaussian noise, and shares
//! that image's mask.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{DatasetError, Manifest, ManifestEntry, Split};
use crate::imaging::{encode_mask_png, encode_png, BinaryMask, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub n_train: usize,
    pub n_test: usize,
    pub side: usize,
    /// Standard deviation of the noise added to test copies; 0 makes exact duplicates.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { n_train: 40, n_test: 10, side: 448, noise_sigma: 0.02, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthExample {
    pub id: String,
    pub image: RasterImage,
    pub mask: BinaryMask,
    /// For test examples, the id of the train image it copies.
    pub source: Option<String>,
}

/// Smooth random field: lattice noise with `cell`-pixel spacing, bilinearly
/// interpolated, in `[-1, 1]`.
fn lattice_noise(rng: &mut ChaCha8Rng, side: usize, cell: usize) -> Vec<f64> {
    let n = side / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let (gy, fy) = (y / cell, (y % cell) as f64 / cell as f64);
        for x in 0..side {
            let (gx, fx) = (x / cell, (x % cell) as f64 / cell as f64);
            let at = |i: usize, j: usize| lattice[j * n + i];
            let top = at(gx, gy) + fx * (at(gx + 1, gy) - at(gx, gy));
            let bottom = at(gx, gy + 1) + fx * (at(gx + 1, gy + 1) - at(gx, gy + 1));
            out.push(top + fy * (bottom - top));
        }
    }
    out
}

fn lesion_image(rng: &mut ChaCha8Rng, side: usize) -> (RasterImage, BinaryMask) {
    let s = side as f64;
    let skin: [f64; 3] = [rng.random_range(0.55..0.85), rng.random_range(0.40..0.65), rng.random_range(0.30..0.55)];
    let lesion = [
        (skin[0] + rng.random_range(0.0..0.12)).min(0.95),
        skin[1] - rng.random_range(0.15..0.25),
        skin[2] - rng.random_range(0.10..0.20),
    ];
    let coarse = lattice_noise(rng, side, 8);
    let fine = lattice_noise(rng, side, 2);
    let cx = rng.random_range(0.3..0.7) * s;
    let cy = rng.random_range(0.3..0.7) * s;
    let ax = rng.random_range(0.10..0.25) * s;
    let ay = rng.random_range(0.10..0.25) * s;
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();
    let inside = |x: usize, y: usize| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / ax).powi(2) + (v / ay).powi(2) <= 1.0
    };
    let mask = BinaryMask::from_fn(side, side, inside).expect("positive side");
    let image = RasterImage::from_fn(side, side, |x, y| {
        let i = y * side + x;
        let base = if mask.get(x, y) { lesion } else { skin };
        let t = 0.10 * coarse[i] + 0.08 * fine[i];
        [0, 1, 2].map(|c| (base[c] + t).clamp(0.0, 1.0) as f32)
    })
    .expect("positive side");
    (image, mask)
}

/// Builds the train and test splits in memory.
pub fn generate(params: &SynthParams) -> (Vec<SynthExample>, Vec<SynthExample>) {
    assert!(params.n_test <= params.n_train, "each test image copies a distinct train image");
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let train: Vec<SynthExample> = (0..params.n_train)
        .map(|i| {
            let (image, mask) = lesion_image(&mut rng, params.side);
            SynthExample { id: format!("train_{i:03}"), image, mask, source: None }
        })
        .collect();
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).expect("finite sigma");
    let test = (0..params.n_test)
        .map(|j| {
            let src = &train[j * params.n_train / params.n_test.max(1)];
            let pixels = src
                .image
                .pixels()
                .iter()
                .map(|&v| {
                    if params.noise_sigma > 0.0 {
                        (v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32
                    } else {
                        v
                    }
                })
                .collect();
            SynthExample {
                id: format!("test_{j:03}"),
                image: RasterImage::new(params.side, params.side, pixels).expect("same shape as source"),
                mask: src.mask.clone(),
                source: Some(src.id.clone()),
            }
        })
        .collect();
    (train, test)
}

/// Writes PNGs plus `manifest.json` under `dir` and returns the manifest path.
pub fn write_dataset(dir: &Path, params: &SynthParams) -> Result<PathBuf, DatasetError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(io(&dir.join(sub)))?;
    }
    let (train, test) = generate(params);
    let mut entries = Vec::new();
    for (split, examples) in [(Split::Train, &train), (Split::Test, &test)] {
        for ex in examples {
            let image_path = PathBuf::from(format!("images/{}.png", ex.id));
            let mask_path = PathBuf::from(format!("masks/{}.png", ex.id));
            fs::write(dir.join(&image_path), encode_png(&ex.image)?).map_err(io(&dir.join(&image_path)))?;
            fs::write(dir.join(&mask_path), encode_mask_png(&ex.mask)?).map_err(io(&dir.join(&mask_path)))?;
            entries.push(ManifestEntry { id: ex.id.clone(), image_path, mask_path, split });
        }
    }
    let manifest_path = dir.join("manifest.json");
    let manifest = Manifest::new(dir, entries);
    fs::write(&manifest_path, manifest.to_json()).map_err(io(&manifest_path))?;
    Ok(manifest_path)
}
