//! Shared residual encoder with two structurally identical UNet decoders:
//! `D_l` learns from labeled images only, `D_p` from pseudo-labels under
//! feature dropout and the shape prior.

mod blocks;
mod decoder;
mod encoder;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{area_weights, resize_for_inference, resize_nearest, Image, Mask, PRIOR_SIZE};
use crate::error::{Error, Result};
use crate::params::{self, ParamStore};

pub use blocks::Mode;
pub use decoder::DecoderSpec;
pub use encoder::{Depth, EncoderSpec, Pyramid};

use decoder::Decoder;
use encoder::Encoder;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MODEL_KIND: &str = "segmodel";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Channel,
    Element,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutLevel {
    /// Only the stride-32 feature; skips pass through untouched.
    Deepest,
    /// Every pyramid level.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureDropoutConfig {
    pub drop_rate: f64,
    pub granularity: Granularity,
    pub level: DropoutLevel,
}

impl Default for FeatureDropoutConfig {
    fn default() -> Self {
        Self {
            drop_rate: 0.5,
            granularity: Granularity::Channel,
            level: DropoutLevel::Deepest,
        }
    }
}

impl FeatureDropoutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::invalid(format!(
                "drop_rate must lie in [0, 1), got {}",
                self.drop_rate
            )));
        }
        Ok(())
    }
}

/// Which decoder produces predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// `D_p`, the normal inference path.
    Prior,
    /// `D_l`; only meaningful for a model trained without unlabeled data,
    /// whose `D_p` never received an update.
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegModelSpec {
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    pub dropout: FeatureDropoutConfig,
    /// Square side the network runs at; a multiple of 32.
    pub input_size: usize,
}

impl Default for SegModelSpec {
    fn default() -> Self {
        Self {
            encoder: EncoderSpec::default(),
            decoder: DecoderSpec::default(),
            dropout: FeatureDropoutConfig::default(),
            input_size: 256,
        }
    }
}

impl SegModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.dropout.validate()?;
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::invalid(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Parameter groups, in checkpoint prefix order.
pub const GROUPS: [&str; 3] = ["encoder", "decoder_l", "decoder_p"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    pub format_version: u32,
    pub spec: SegModelSpec,
    pub inference_branch: Branch,
}

pub struct SegModel {
    spec: SegModelSpec,
    stores: [ParamStore; 3],
    encoder: Encoder,
    decoder_l: Decoder,
    decoder_p: Decoder,
    inference_branch: Branch,
}

impl SegModel {
    pub fn new(spec: &SegModelSpec, seed: u64) -> Result<Self> {
        Self::on_device(spec, seed, &Device::Cpu)
    }

    pub fn on_device(spec: &SegModelSpec, seed: u64, device: &Device) -> Result<Self> {
        spec.validate()?;
        let stores = [1u64, 2, 3].map(|stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            ParamStore::new(rng.random(), DType::F32, device)
        });
        let encoder = Encoder::new(&spec.encoder, stores[0].var_builder())?;
        let decoder_l = Decoder::new(&spec.decoder, &spec.encoder.widths, stores[1].var_builder())?;
        let decoder_p = Decoder::new(&spec.decoder, &spec.encoder.widths, stores[2].var_builder())?;
        let model = Self {
            spec: spec.clone(),
            stores,
            encoder,
            decoder_l,
            decoder_p,
            inference_branch: Branch::Prior,
        };
        if let Some(path) = &spec.encoder.pretrained {
            let path = Path::new(path);
            let (tensors, _) = params::load_safetensors(path, device)?;
            model.stores[0]
                .load(&tensors)
                .map_err(|e| Error::Checkpoint {
                    path: path.to_path_buf(),
                    message: format!("pretrained encoder weights do not fit: {e}"),
                })?;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &SegModelSpec {
        &self.spec
    }

    pub fn device(&self) -> &Device {
        self.stores[0].device()
    }

    pub fn inference_branch(&self) -> Branch {
        self.inference_branch
    }

    pub fn set_inference_branch(&mut self, branch: Branch) {
        self.inference_branch = branch;
    }

    /// `images`: `B x 1 x H x W` with H and W multiples of 32.
    pub fn encode(&self, images: &Tensor, mode: Mode) -> Result<Pyramid> {
        self.encoder.forward(images, mode)
    }

    pub fn decode_l(&self, pyramid: &Pyramid, mode: Mode) -> Result<Tensor> {
        self.decoder_l.forward(pyramid, mode)
    }

    /// In training modes a fresh dropout mask is drawn from `rng`; in
    /// [`Mode::Eval`] dropout is the identity and `rng` is not touched.
    pub fn decode_p<R: Rng + ?Sized>(
        &self,
        pyramid: &Pyramid,
        dropout: &FeatureDropoutConfig,
        rng: &mut R,
        mode: Mode,
    ) -> Result<Tensor> {
        if !mode.is_training() || dropout.drop_rate == 0.0 {
            return self.decoder_p.forward(pyramid, mode);
        }
        let mut features = pyramid.features.clone();
        let n = features.len();
        let levels = match dropout.level {
            DropoutLevel::Deepest => n - 1..n,
            DropoutLevel::All => 0..n,
        };
        for i in levels {
            features[i] = apply_dropout(&features[i], dropout, rng)?;
        }
        self.decoder_p.forward(&Pyramid { features }, mode)
    }

    /// Eval-mode logits from the inference branch; the other decoder is not run.
    pub fn infer_logits(&self, images: &Tensor) -> Result<Tensor> {
        let pyramid = self.encode(images, Mode::Eval)?;
        match self.inference_branch {
            Branch::Prior => self.decoder_p.forward(&pyramid, Mode::Eval),
            Branch::Labeled => self.decoder_l.forward(&pyramid, Mode::Eval),
        }
    }

    /// Binary mask at the image's own resolution: resize to the network
    /// input, take the argmax, resize back nearest-neighbor.
    pub fn predict(&self, image: &Image) -> Result<Mask> {
        Ok(self.predict_batch(std::slice::from_ref(image))?.remove(0))
    }

    pub fn predict_batch(&self, images: &[Image]) -> Result<Vec<Mask>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let s = self.spec.input_size;
        let resized: Vec<Image> = images
            .iter()
            .map(|im| resize_for_inference(im, s))
            .collect();
        let batch = images_to_tensor(&resized, self.device())?;
        let masks = argmax_masks(&self.infer_logits(&batch)?)?;
        Ok(masks
            .into_iter()
            .zip(images)
            .map(|(m, im)| {
                let (h, w) = im.dim();
                if (h, w) == m.dim() {
                    m
                } else {
                    resize_nearest(&m, h, w)
                }
            })
            .collect())
    }

    fn group_index(group: &str) -> Result<usize> {
        GROUPS
            .iter()
            .position(|g| *g == group)
            .ok_or_else(|| Error::invalid(format!("unknown parameter group {group}")))
    }

    /// Trainable variables of one group, names prefixed by the group.
    pub fn group_params(&self, group: &str) -> Result<Vec<(String, Var)>> {
        let i = Self::group_index(group)?;
        Ok(self.stores[i]
            .trainable()
            .into_iter()
            .map(|(k, v)| (format!("{group}.{k}"), v))
            .collect())
    }

    /// Trainable variables of all three groups.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        GROUPS
            .iter()
            .flat_map(|g| self.group_params(g).expect("known group"))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.stores.iter().map(ParamStore::num_parameters).sum()
    }

    /// Checksum of one group's tensors, buffers included.
    pub fn group_checksum(&self, group: &str) -> Result<String> {
        self.stores[Self::group_index(group)?].checksum()
    }

    /// Every tensor (weights and buffers), names prefixed by group.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (g, store) in GROUPS.iter().zip(&self.stores) {
            out.extend(params::prefixed(g, &store.snapshot()?));
        }
        Ok(out)
    }

    pub fn load_snapshot(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (g, store) in GROUPS.iter().zip(&self.stores) {
            store.load(&params::strip_prefix(g, tensors))?;
        }
        Ok(())
    }

    pub fn checksum(&self) -> Result<String> {
        params::checksum(&self.snapshot()?)
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            kind: MODEL_KIND.into(),
            format_version: MODEL_FORMAT_VERSION,
            spec: self.spec.clone(),
            inference_branch: self.inference_branch,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "model": self.meta() });
        params::save_safetensors(path, &self.snapshot()?, &meta)
    }

    /// Load a model from a file written by [`SegModel::save`] or by the
    /// trainer (which stores extra state alongside).
    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let (tensors, meta) = params::load_safetensors(path, device)?;
        let ckpt_err = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let meta: ModelMeta = serde_json::from_value(
            meta.get("model")
                .cloned()
                .ok_or_else(|| ckpt_err("not a segmentation model checkpoint".into()))?,
        )?;
        if meta.kind != MODEL_KIND || meta.format_version != MODEL_FORMAT_VERSION {
            return Err(ckpt_err(format!(
                "unsupported checkpoint {} v{}",
                meta.kind, meta.format_version
            )));
        }
        let mut spec = meta.spec.clone();
        spec.encoder.pretrained = None;
        let mut model = Self::on_device(&spec, 0, device)?;
        model.spec = meta.spec;
        model.inference_branch = meta.inference_branch;
        let weights: BTreeMap<String, Tensor> = tensors
            .into_iter()
            .filter(|(k, _)| GROUPS.iter().any(|g| k.starts_with(&format!("{g}."))))
            .collect();
        model
            .load_snapshot(&weights)
            .map_err(|e| ckpt_err(e.to_string()))?;
        Ok(model)
    }
}

/// Multiply by a Bernoulli keep-mask scaled by `1 / (1 - p)`.
pub fn apply_dropout<R: Rng + ?Sized>(
    feature: &Tensor,
    cfg: &FeatureDropoutConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    let p = cfg.drop_rate;
    if p == 0.0 {
        return Ok(feature.clone());
    }
    let dims = feature.dims().to_vec();
    let mask_dims = match cfg.granularity {
        Granularity::Element => dims.clone(),
        Granularity::Channel => {
            let mut d = vec![1usize; dims.len()];
            d[..2.min(dims.len())].copy_from_slice(&dims[..2.min(dims.len())]);
            d
        }
    };
    let n: usize = mask_dims.iter().product();
    let keep = (1.0 / (1.0 - p)) as f32;
    let values: Vec<f32> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = Tensor::from_vec(values, mask_dims, feature.device())?.to_dtype(feature.dtype())?;
    Ok(feature.broadcast_mul(&mask)?)
}

/// Per-pixel argmax of `B x 2 x H x W` logits; ties go to background.
pub fn argmax_masks(logits: &Tensor) -> Result<Vec<Mask>> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected 2 logit channels, got {c}"
        )));
    }
    let fg = logits
        .narrow(1, 1, 1)?
        .gt(&logits.narrow(1, 0, 1)?)?
        .to_dtype(DType::U8)?
        .reshape((b, h * w))?
        .to_vec2::<u8>()?;
    fg.into_iter()
        .map(|v| {
            Ok(Array2::from_shape_vec((h, w), v)
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?)
        })
        .collect()
}

/// Softmax foreground channel of `B x 2 x H x W` logits, area-resampled to
/// `B x 1 x 64 x 64`. Differentiable in `logits`.
pub fn foreground_prob_64(logits: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected 2 logit channels, got {c}"
        )));
    }
    let prob = candle_nn::ops::softmax(logits, 1)?.narrow(1, 1, 1)?;
    if (h, w) == (PRIOR_SIZE, PRIOR_SIZE) {
        return Ok(prob);
    }
    let dev = logits.device();
    let dt = logits.dtype();
    // Plain 2-D products only: batched matmuls over broadcast operands are
    // computed incorrectly by the CPU backend.
    let weights_t = |src: usize| -> Result<Tensor> {
        Ok(
            Tensor::from_vec(area_weights(src, PRIOR_SIZE), (PRIOR_SIZE, src), dev)?
                .to_dtype(dt)?
                .t()?
                .contiguous()?,
        )
    };
    let rows = prob.reshape((b * h, w))?.matmul(&weights_t(w)?)?;
    let cols = rows
        .reshape((b, h, PRIOR_SIZE))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * PRIOR_SIZE, h))?
        .matmul(&weights_t(h)?)?;
    let out = cols
        .reshape((b, PRIOR_SIZE, PRIOR_SIZE))?
        .transpose(1, 2)?
        .contiguous()?;
    Ok(out.reshape((b, 1, PRIOR_SIZE, PRIOR_SIZE))?)
}

/// Stack equally sized images into a `B x 1 x H x W` f32 tensor.
pub fn images_to_tensor(images: &[Image], device: &Device) -> Result<Tensor> {
    let (h, w) = images
        .first()
        .map(|i| i.dim())
        .ok_or_else(|| Error::invalid("empty image batch"))?;
    let mut flat = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {h}x{w} and {:?} images",
                im.dim()
            )));
        }
        flat.extend(im.iter().copied());
    }
    Ok(Tensor::from_vec(flat, (images.len(), 1, h, w), device)?)
}

/// Stack equally sized masks into a `B x H x W` u32 class-index tensor.
pub fn masks_to_tensor(masks: &[Mask], device: &Device) -> Result<Tensor> {
    let (h, w) = masks
        .first()
        .map(|m| m.dim())
        .ok_or_else(|| Error::invalid("empty mask batch"))?;
    let mut flat = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {h}x{w} and {:?} masks",
                m.dim()
            )));
        }
        flat.extend(m.iter().map(|&v| v as u32));
    }
    Ok(Tensor::from_vec(flat, (masks.len(), h, w), device)?)
}
