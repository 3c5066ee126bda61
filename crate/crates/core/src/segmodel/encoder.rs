use candle_core::Tensor;
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use super::blocks::{ConvNorm, Mode};
use crate::error::{Error, Result};

/// Residual backbone depth: blocks per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Depth {
    /// One block per stage, for desk-scale runs.
    Tiny,
    Resnet18,
    Resnet34,
}

impl Depth {
    pub fn blocks(self) -> [usize; 4] {
        match self {
            Depth::Tiny => [1, 1, 1, 1],
            Depth::Resnet18 => [2, 2, 2, 2],
            Depth::Resnet34 => [3, 4, 6, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub depth: Depth,
    /// Channels of the stem and of the four residual stages.
    pub widths: [usize; 5],
    /// Optional safetensors file with encoder weights, keyed like this crate's
    /// encoder parameters. `None` means random initialization.
    pub pretrained: Option<String>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            depth: Depth::Resnet34,
            widths: [64, 64, 128, 256, 512],
            pretrained: None,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::invalid("encoder widths must be positive"));
        }
        Ok(())
    }
}

/// Encoder outputs at strides 2, 4, 8, 16 and 32, shallowest first.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub features: Vec<Tensor>,
}

impl Pyramid {
    pub fn deepest(&self) -> &Tensor {
        self.features.last().expect("pyramid is never empty")
    }

    pub fn detach(&self) -> Pyramid {
        Pyramid {
            features: self.features.iter().map(Tensor::detach).collect(),
        }
    }
}

#[derive(Clone)]
struct BasicBlock {
    conv1: ConvNorm,
    conv2: ConvNorm,
    shortcut: Option<ConvNorm>,
}

impl BasicBlock {
    fn new(in_c: usize, out_c: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let shortcut = if stride != 1 || in_c != out_c {
            Some(ConvNorm::new(in_c, out_c, 1, stride, vb.pp("shortcut"))?)
        } else {
            None
        };
        Ok(Self {
            conv1: ConvNorm::new(in_c, out_c, 3, stride, vb.pp("conv1"))?,
            conv2: ConvNorm::new(out_c, out_c, 3, 1, vb.pp("conv2"))?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv1.forward_relu(x, mode)?;
        let y = self.conv2.forward(&y, mode)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

#[derive(Clone)]
pub(crate) struct Encoder {
    stem: ConvNorm,
    stages: Vec<Vec<BasicBlock>>,
}

impl Encoder {
    pub fn new(spec: &EncoderSpec, vb: VarBuilder) -> Result<Self> {
        spec.validate()?;
        let w = spec.widths;
        let stem = ConvNorm::new(1, w[0], 7, 2, vb.pp("stem"))?;
        let mut stages = Vec::with_capacity(4);
        let mut in_c = w[0];
        for (s, &n) in spec.depth.blocks().iter().enumerate() {
            let out_c = w[s + 1];
            let mut blocks = Vec::with_capacity(n);
            for b in 0..n {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    in_c,
                    out_c,
                    stride,
                    vb.pp(format!("layer{}.{b}", s + 1)),
                )?);
                in_c = out_c;
            }
            stages.push(blocks);
        }
        Ok(Self { stem, stages })
    }

    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<Pyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected 1 input channel, got {c}"
            )));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} is not a multiple of 32 in both dimensions"
            )));
        }
        let s2 = self.stem.forward_relu(images, mode)?;
        let mut features = vec![s2.clone()];
        let mut x = crate::layers::max_pool2(&s2)?;
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x, mode)?;
            }
            features.push(x.clone());
        }
        Ok(Pyramid { features })
    }
}
