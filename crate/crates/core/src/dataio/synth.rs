//! Deterministic ultrasound-like shape dataset for desk-scale experiments.
//!
//! Each record holds one to three smooth blobs (perturbed ellipses) as the
//! target, drawn darker than a textured background. Smaller, ragged dark
//! blobs that are *not* part of the target act as artifacts. The piecewise
//! image is blurred and then corrupted with spatially correlated
//! multiplicative speckle plus a little additive noise.

use std::f32::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{foreground_fraction, Image, ImageRecord, Mask, Source};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub format_version: u32,
    pub n: usize,
    pub canvas: usize,
    pub seed: u64,
    pub ids: Vec<String>,
}

struct Blob {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    angle: f32,
    harmonics: [(f32, f32); 3],
}

impl Blob {
    fn random(
        rng: &mut ChaCha8Rng,
        canvas: f32,
        radius: (f32, f32),
        roughness: f32,
        margin: f32,
    ) -> Self {
        let mut harmonics = [(0.0, 0.0); 3];
        for h in harmonics.iter_mut() {
            *h = (
                rng.random_range(0.0..=roughness),
                rng.random_range(0.0..2.0 * PI),
            );
        }
        Self {
            cy: rng.random_range(margin..1.0 - margin) * canvas,
            cx: rng.random_range(margin..1.0 - margin) * canvas,
            ry: rng.random_range(radius.0..radius.1) * canvas,
            rx: rng.random_range(radius.0..radius.1) * canvas,
            angle: rng.random_range(0.0..PI),
            harmonics,
        }
    }

    fn contains(&self, y: f32, x: f32) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let r = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        let bound = 1.0
            + self
                .harmonics
                .iter()
                .enumerate()
                .map(|(k, (amp, phase))| amp * ((k as f32 + 2.0) * theta + phase).cos())
                .sum::<f32>();
        r <= bound
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i32;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamped borders.
pub(crate) fn blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let tmp: Image = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * img[[y, clamp(x as isize + i as isize - r, w)]])
            .sum::<f32>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * tmp[[clamp(y as isize + i as isize - r, h), x]])
            .sum::<f32>()
    })
}

fn generate_one(index: usize, canvas: usize, seed: u64) -> Result<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let c = canvas as f32;

    let n_targets = match rng.random_range(0..20) {
        0..=11 => 1,
        12..=16 => 2,
        _ => 3,
    };
    let scale = if n_targets == 1 { 1.0 } else { 0.75 };
    let targets: Vec<Blob> = (0..n_targets)
        .map(|_| Blob::random(&mut rng, c, (0.10 * scale, 0.24 * scale), 0.10, 0.25))
        .collect();
    let n_artifacts = rng.random_range(0..=2);
    let artifacts: Vec<Blob> = (0..n_artifacts)
        .map(|_| Blob::random(&mut rng, c, (0.03, 0.07), 0.35, 0.1))
        .collect();

    let mut mask = Mask::zeros((canvas, canvas));
    let bg = rng.random_range(0.45..0.6f32);
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.03..0.07),
                rng.random_range(0.5..3.0) * 2.0 * PI / c,
                rng.random_range(0.5..3.0) * 2.0 * PI / c,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let contrast: Vec<f32> = targets
        .iter()
        .map(|_| rng.random_range(0.15..0.28))
        .collect();
    let artifact_contrast: Vec<f32> = artifacts
        .iter()
        .map(|_| rng.random_range(0.15..0.28))
        .collect();

    let mut clean = Image::zeros((canvas, canvas));
    for y in 0..canvas {
        for x in 0..canvas {
            let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
            let mut v = bg
                + waves
                    .iter()
                    .map(|(a, ky, kx, p)| a * (ky * fy + kx * fx + p).sin())
                    .sum::<f32>();
            for (b, dc) in artifacts.iter().zip(&artifact_contrast) {
                if b.contains(fy, fx) {
                    v -= dc;
                }
            }
            for (b, dc) in targets.iter().zip(&contrast) {
                if b.contains(fy, fx) {
                    mask[[y, x]] = 1;
                    v = v.min(bg - dc);
                }
            }
            clean[[y, x]] = v;
        }
    }

    let blurred = blur(&clean, c / 48.0);
    let raw_noise = Image::from_shape_fn((canvas, canvas), |_| StandardNormal.sample(&mut rng));
    let speckle = blur(&raw_noise, 0.7);
    let speckle_std = (speckle.iter().map(|v| v * v).sum::<f32>() / speckle.len() as f32).sqrt();
    let additive = Image::from_shape_fn((canvas, canvas), |_| {
        let z: f32 = StandardNormal.sample(&mut rng);
        0.03 * z
    });
    let image = Image::from_shape_fn((canvas, canvas), |(y, x)| {
        let s = 1.0 + 0.35 * speckle[[y, x]] / speckle_std.max(1e-6);
        let v = (blurred[[y, x]] * s + additive[[y, x]]).clamp(0.0, 1.0);
        // 8-bit quantization keeps PNG round trips lossless.
        (v * 255.0).round() / 255.0
    });

    let frac = foreground_fraction(&mask);
    if !(frac > 0.0 && frac < 0.9) {
        return Err(Error::invalid(format!(
            "synthetic record {index}: foreground fraction {frac} out of range"
        )));
    }
    ImageRecord::new(
        format!("synth_{index:05}"),
        image,
        Some(mask),
        Source::Synthetic,
    )
}

/// Generate `n` records on a `canvas x canvas` grid. Record `i` depends only on
/// `(seed, i, canvas)`.
pub fn generate_synthetic(n: usize, canvas: usize, seed: u64) -> Result<Vec<ImageRecord>> {
    if n < 1 {
        return Err(Error::invalid("synthetic dataset needs n >= 1"));
    }
    if canvas < 64 {
        return Err(Error::invalid(format!("canvas {canvas} < 64")));
    }
    (0..n).map(|i| generate_one(i, canvas, seed)).collect()
}
