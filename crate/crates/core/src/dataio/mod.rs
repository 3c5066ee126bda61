//! Datasets: loading, synthetic generation, partitioning, augmentation and
//! batch sampling.

mod augment;
mod load;
mod partition;
mod resample;
mod sampler;
mod synth;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, resize_for_inference, AugmentationParams};
pub use load::{
    load_dataset, load_id_list, load_image, load_synthetic, save_dataset, save_mask_png, Layout,
};
pub use partition::{make_partition, make_partition_with_holdout, DatasetSplit, Fraction, Holdout};
pub use resample::{area_weights, resize_bilinear, resize_mask_64, resize_nearest, PRIOR_SIZE};
pub use sampler::{sample_batches, BatchSampler, CyclicSampler};
pub use synth::{generate_synthetic, SyntheticManifest};

/// Grayscale image, row-major `H x W`, values in `[0, 1]`.
pub type Image = Array2<f32>;
/// Binary mask, values exactly 0 or 1.
pub type Mask = Array2<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Tn3k,
    Busi,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub image: Image,
    pub mask: Option<Mask>,
    pub source: Source,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        image: Image,
        mask: Option<Mask>,
        source: Source,
    ) -> Result<Self> {
        let id = id.into();
        if image.is_empty() {
            return Err(Error::invalid(format!("record {id}: empty image")));
        }
        if let Some(m) = &mask {
            if m.dim() != image.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "record {id}: image {:?} vs mask {:?}",
                    image.dim(),
                    m.dim()
                )));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::invalid(format!("record {id}: mask is not binary")));
            }
        }
        Ok(Self {
            id,
            image,
            mask,
            source,
        })
    }

    pub fn height(&self) -> usize {
        self.image.nrows()
    }

    pub fn width(&self) -> usize {
        self.image.ncols()
    }

    pub fn mask_or_err(&self) -> Result<&Mask> {
        self.mask
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("record {} has no ground-truth mask", self.id)))
    }
}

/// Foreground fraction of a binary mask.
pub fn foreground_fraction(mask: &Mask) -> f64 {
    mask.iter().filter(|&&v| v == 1).count() as f64 / mask.len().max(1) as f64
}
