use rand::Rng;
use serde::{Deserialize, Serialize};

use super::resample::{bilerp, resize_bilinear};
use super::{Image, ImageRecord, Mask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationParams {
    pub resize_to: usize,
    pub crop_to: usize,
    /// Rotation is drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f32,
    pub scale_range: (f32, f32),
}

impl Default for AugmentationParams {
    fn default() -> Self {
        Self {
            resize_to: 320,
            crop_to: 256,
            rotation_deg: 15.0,
            scale_range: (0.8, 1.25),
        }
    }
}

impl AugmentationParams {
    /// Resize to `size` and nothing else.
    pub fn identity(size: usize) -> Self {
        Self {
            resize_to: size,
            crop_to: size,
            rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if self.crop_to == 0 || self.crop_to > self.resize_to {
            return Err(Error::invalid(format!(
                "crop_to {} must be in 1..={}",
                self.crop_to, self.resize_to
            )));
        }
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0) {
            return Err(Error::invalid(format!(
                "scale range ({lo}, {hi}) must contain 1.0"
            )));
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg.is_finite()) {
            return Err(Error::invalid(
                "rotation_deg must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Resize, then rotate/scale about the center, then crop. The three steps are
/// composed into a single inverse map so the image is interpolated once
/// (bilinear) and the mask is sampled nearest-neighbour. Samples that fall
/// outside the source read as zero.
pub fn augment<R: Rng + ?Sized>(
    record: &ImageRecord,
    params: &AugmentationParams,
    rng: &mut R,
) -> Result<ImageRecord> {
    params.validate()?;
    let (h, w) = record.image.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("record {}: empty image", record.id)));
    }
    let r = params.resize_to as f32;
    let c = params.crop_to;
    let angle = if params.rotation_deg > 0.0 {
        rng.random_range(-params.rotation_deg..=params.rotation_deg)
            .to_radians()
    } else {
        0.0
    };
    let (lo, hi) = params.scale_range;
    let scale = if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    };
    let slack = params.resize_to - c;
    let (oy, ox) = if slack > 0 {
        (rng.random_range(0..=slack), rng.random_range(0..=slack))
    } else {
        (0, 0)
    };

    let (sin, cos) = angle.sin_cos();
    let center = r / 2.0;
    let (ky, kx) = (h as f32 / r, w as f32 / r);
    // Crop pixel -> continuous coordinate in the resized frame, before the
    // forward rotation/scale was applied.
    let source = |u: usize, v: usize| {
        let py = u as f32 + 0.5 + oy as f32 - center;
        let px = v as f32 + 0.5 + ox as f32 - center;
        let qy = (cos * py - sin * px) / scale + center;
        let qx = (sin * py + cos * px) / scale + center;
        (qy * ky, qx * kx)
    };

    let image = Image::from_shape_fn((c, c), |(u, v)| {
        let (y, x) = source(u, v);
        if y < 0.0 || x < 0.0 || y > h as f32 || x > w as f32 {
            0.0
        } else {
            bilerp(
                &record.image,
                (y - 0.5).clamp(0.0, (h - 1) as f32),
                (x - 0.5).clamp(0.0, (w - 1) as f32),
            )
        }
    });
    let mask = record.mask.as_ref().map(|m| {
        Mask::from_shape_fn((c, c), |(u, v)| {
            let (y, x) = source(u, v);
            if y < 0.0 || x < 0.0 || y >= h as f32 || x >= w as f32 {
                0
            } else {
                m[[(y as usize).min(h - 1), (x as usize).min(w - 1)]]
            }
        })
    });
    ImageRecord::new(record.id.clone(), image, mask, record.source)
}

/// The deterministic preprocessing used at evaluation time.
pub fn resize_for_inference(image: &Image, size: usize) -> Image {
    resize_bilinear(image, size, size)
}
