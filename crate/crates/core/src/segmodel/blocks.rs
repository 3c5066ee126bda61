use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;

use crate::conv::Conv;
use crate::error::Result;
pub use crate::layers::Mode;
use crate::layers::Norm;

/// Bias-free convolution followed by batch normalization.
#[derive(Clone)]
pub(crate) struct ConvNorm {
    conv: Conv,
    norm: Norm,
}

impl ConvNorm {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(in_c, out_c, k, stride, k / 2, false, vb.pp("conv"))?,
            norm: Norm::new(out_c, vb.pp("bn"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.norm.forward(&self.conv.forward(x)?, mode)
    }

    pub fn forward_relu(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.norm.forward_relu(&self.conv.forward(x)?, mode)
    }
}
