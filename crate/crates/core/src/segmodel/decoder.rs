use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use super::blocks::{ConvNorm, Mode};
use super::encoder::Pyramid;
use crate::conv::Conv;
use crate::error::{Error, Result};
use crate::layers::upsample2_concat;

/// UNet decoder: five blocks of (2x nearest upsample, concat skip, two
/// conv-BN-ReLU layers), then a 3x3 two-class logit head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSpec {
    pub widths: [usize; 5],
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self {
            widths: [256, 128, 64, 32, 16],
        }
    }
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::invalid("decoder widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct UpBlock {
    conv1: ConvNorm,
    conv2: ConvNorm,
}

#[derive(Clone)]
pub(crate) struct Decoder {
    blocks: Vec<UpBlock>,
    head: Conv,
}

impl Decoder {
    /// `encoder_widths` are the pyramid channels, shallowest first.
    pub fn new(spec: &DecoderSpec, encoder_widths: &[usize; 5], vb: VarBuilder) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(5);
        let mut in_c = encoder_widths[4];
        for (i, &out_c) in spec.widths.iter().enumerate() {
            // Block i consumes the skip at stride 2^(4 - i); the last block has none.
            let skip_c = if i < 4 { encoder_widths[3 - i] } else { 0 };
            let vb_i = vb.pp(format!("block{i}"));
            blocks.push(UpBlock {
                conv1: ConvNorm::new(in_c + skip_c, out_c, 3, 1, vb_i.pp("conv1"))?,
                conv2: ConvNorm::new(out_c, out_c, 3, 1, vb_i.pp("conv2"))?,
            });
            in_c = out_c;
        }
        let head = Conv::new(in_c, 2, 3, 1, 1, true, vb.pp("head"))?;
        Ok(Self { blocks, head })
    }

    pub fn forward(&self, pyramid: &Pyramid, mode: Mode) -> Result<Tensor> {
        let f = &pyramid.features;
        let mut x = pyramid.deepest().clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let skip = if i < 4 { Some(&f[3 - i]) } else { None };
            x = upsample2_concat(&x, skip)?;
            x = block.conv1.forward_relu(&x, mode)?;
            x = block.conv2.forward_relu(&x, mode)?;
        }
        Ok(self.head.forward(&x)?)
    }
}
