use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use crate::conv::{Conv, ConvTranspose};
use crate::dataio::PRIOR_SIZE;
use crate::error::{Error, Result};
use crate::layers::{Mode, Norm};

/// Mask generator: five transposed convolutions, 1x1 -> 4 -> 8 -> 16 -> 32 -> 64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    /// Output channels of the five stages; the last must be 1.
    pub widths: Vec<usize>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            widths: vec![512, 256, 128, 64, 1],
        }
    }
}

/// Critic: five convolutions, 64 -> 32 -> 16 -> 8 -> 4 -> 1, leaky rectifiers
/// between them and an unsquashed scalar at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    /// Output channels of the five stages; the last must be 1.
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256, 512, 1],
            leaky_slope: 0.2,
        }
    }
}

fn check_widths(kind: &str, widths: &[usize]) -> Result<()> {
    if widths.len() != 5 || widths.last() != Some(&1) || widths.contains(&0) {
        return Err(Error::invalid(format!(
            "{kind} needs five positive widths ending in 1, got {widths:?}"
        )));
    }
    Ok(())
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be positive"));
        }
        check_widths("generator", &self.widths)
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid("leaky_slope must be in [0, 1)"));
        }
        check_widths("discriminator", &self.widths)
    }
}

/// Anything that maps a `B x 1 x 64 x 64` batch to `B` scores.
pub trait Scorer {
    fn score(&self, masks: &Tensor) -> candle_core::Result<Tensor>;
}

impl<F> Scorer for F
where
    F: Fn(&Tensor) -> candle_core::Result<Tensor>,
{
    fn score(&self, masks: &Tensor) -> candle_core::Result<Tensor> {
        self(masks)
    }
}

pub struct Generator {
    spec: GeneratorSpec,
    stages: Vec<ConvTranspose>,
    norms: Vec<Norm>,
}

impl Generator {
    pub fn new(spec: &GeneratorSpec, vb: VarBuilder) -> Result<Self> {
        spec.validate()?;
        let mut stages = Vec::with_capacity(5);
        let mut norms = Vec::with_capacity(4);
        let mut in_c = spec.latent_dim;
        for (i, &out_c) in spec.widths.iter().enumerate() {
            let (stride, padding) = if i == 0 { (1, 0) } else { (2, 1) };
            let vb_i = vb.pp(format!("stage{i}"));
            let last = i == 4;
            stages.push(ConvTranspose::new(
                in_c,
                out_c,
                4,
                stride,
                padding,
                last,
                vb_i.pp("conv"),
            )?);
            if !last {
                norms.push(Norm::new(out_c, vb_i.pp("bn"))?);
            }
            in_c = out_c;
        }
        Ok(Self {
            spec: spec.clone(),
            stages,
            norms,
        })
    }

    /// `z`: `B x latent_dim` -> masks `B x 1 x 64 x 64` in `[0, 1]`.
    pub fn forward(&self, z: &Tensor, train: bool) -> Result<Tensor> {
        let mode = if train { Mode::Train } else { Mode::Eval };
        let b = z.dim(0)?;
        let mut x = z.reshape((b, self.spec.latent_dim, 1, 1))?;
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(&x)?;
            if let Some(bn) = self.norms.get(i) {
                x = bn.forward_relu(&x, mode)?;
            }
        }
        Ok(candle_nn::ops::sigmoid(&x)?)
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }
}

#[derive(Clone)]
pub struct Critic {
    stages: Vec<Conv>,
    slope: f64,
}

impl Critic {
    pub fn new(spec: &DiscriminatorSpec, vb: VarBuilder) -> Result<Self> {
        spec.validate()?;
        let mut stages = Vec::with_capacity(5);
        let mut in_c = 1;
        for (i, &out_c) in spec.widths.iter().enumerate() {
            let (stride, padding) = if i < 4 { (2, 1) } else { (1, 0) };
            stages.push(Conv::new(
                in_c,
                out_c,
                4,
                stride,
                padding,
                true,
                vb.pp(format!("stage{i}")),
            )?);
            in_c = out_c;
        }
        Ok(Self {
            stages,
            slope: spec.leaky_slope,
        })
    }
}

impl Scorer for Critic {
    fn score(&self, masks: &Tensor) -> candle_core::Result<Tensor> {
        let b = masks.dim(0)?;
        let mut x = masks.reshape((b, 1, PRIOR_SIZE, PRIOR_SIZE))?;
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(&x)?;
            if i < last {
                x = candle_nn::ops::leaky_relu(&x, self.slope)?;
            }
        }
        x.reshape(b)
    }
}
