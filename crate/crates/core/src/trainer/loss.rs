use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmodel::{foreground_prob_64, FeatureDropoutConfig, Mode, SegModel};
use crate::shape_prior::{dsr_loss, DiscriminatorHandle};

/// Weights of the unsupervised terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the shape-prior term inside the unsupervised loss.
    pub lambda_dsr: f64,
    /// Weight of the unsupervised loss in the total.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dsr: 0.1,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_dsr", self.lambda_dsr), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `init_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, init_lr: f64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be positive"));
    }
    if iter > max_iter {
        return Err(Error::invalid(format!(
            "iteration {iter} beyond schedule end {max_iter}"
        )));
    }
    Ok(init_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Mean per-pixel cross-entropy of two-class logits `B x 2 x H x W` against
/// class indices `B x H x W`, reduced in f64 and returned as an f64 scalar.
///
/// With `d = l1 - l0`, the loss is `softplus(d)` for background pixels and
/// `softplus(-d)` for foreground ones.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected 2 logit channels, got {c}"
        )));
    }
    if targets.dims() != [b, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "targets {:?} do not match logits {:?}",
            targets.dims(),
            logits.dims()
        )));
    }
    let d = (logits.narrow(1, 1, 1)? - logits.narrow(1, 0, 1)?)?.reshape((b, h, w))?;
    let sign = targets.to_dtype(d.dtype())?.affine(-2.0, 1.0)?;
    let z = (d * sign)?;
    let softplus = (z.relu()? + (z.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok(softplus.to_dtype(DType::F64)?.mean_all()?)
}

/// Hard per-pixel labels (ties to background), cut from the graph.
pub fn pseudo_label(logits: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected 2 logit channels, got {c}"
        )));
    }
    let logits = logits.detach();
    Ok(logits
        .narrow(1, 1, 1)?
        .gt(&logits.narrow(1, 0, 1)?)?
        .to_dtype(DType::U32)?
        .reshape((b, h, w))?)
}

/// Cross-entropy of the labeled decoder on a labeled batch.
pub fn supervised_loss(
    model: &SegModel,
    images: &Tensor,
    masks: &Tensor,
    mode: Mode,
) -> Result<Tensor> {
    let pyramid = model.encode(images, mode)?;
    cross_entropy(&model.decode_l(&pyramid, mode)?, masks)
}

/// The parts of the unsupervised loss, each an f64 scalar tensor.
pub struct UnsupervisedTerms {
    /// Consistency cross-entropy against the pseudo-labels.
    pub consistency: Tensor,
    /// `lambda_dsr * dsr_loss`, or zero without a prior.
    pub shape: Tensor,
    pub total: Tensor,
}

/// Consistency of the dropout-perturbed prior decoder with detached
/// pseudo-labels from the labeled decoder, plus the weighted shape-prior
/// term. Only the prior-decoder branch carries gradient.
#[allow(clippy::too_many_arguments)]
pub fn unsupervised_loss<R: Rng + ?Sized>(
    model: &SegModel,
    dsr: Option<&DiscriminatorHandle>,
    images: &Tensor,
    ids: &[String],
    dropout: &FeatureDropoutConfig,
    weights: &LossWeights,
    rng: &mut R,
    mode: Mode,
) -> Result<UnsupervisedTerms> {
    let pyramid = model.encode(images, mode)?;
    let target_mode = if mode == Mode::Eval {
        Mode::Eval
    } else {
        Mode::TrainFrozenStats
    };
    let labels = pseudo_label(&model.decode_l(&pyramid.detach(), target_mode)?)?;
    let logits_p = model.decode_p(&pyramid, dropout, rng, mode)?;
    let consistency = cross_entropy(&logits_p, &labels)?;
    let shape = match dsr {
        Some(handle) => {
            (dsr_loss(handle, &foreground_prob_64(&logits_p)?)?.to_dtype(DType::F64)?
                * weights.lambda_dsr)?
        }
        None => Tensor::zeros((), DType::F64, images.device())?,
    };
    let total = (&consistency + &shape)?;
    let value = total.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "unsupervised loss".into(),
            detail: format!("on batch [{}]", ids.join(", ")),
        });
    }
    Ok(UnsupervisedTerms {
        consistency,
        shape,
        total,
    })
}

/// `ls + gamma * lu`.
pub fn total_loss(ls: &Tensor, lu: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    Ok((ls + (lu * weights.gamma)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn poly_lr_endpoints_and_errors() {
        assert_eq!(poly_lr(0, 100, 1e-3, 0.9).unwrap(), 1e-3);
        assert_eq!(poly_lr(100, 100, 1e-3, 0.9).unwrap(), 0.0);
        assert!(poly_lr(101, 100, 1e-3, 0.9).is_err());
        assert!(poly_lr(0, 0, 1e-3, 0.9).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let dev = Device::Cpu;
        let t = Tensor::from_vec(vec![0u32, 1, 1, 0], (1, 2, 2), &dev).unwrap();
        let zeros = Tensor::zeros((1, 2, 2, 2), DType::F32, &dev).unwrap();
        let l = cross_entropy(&zeros, &t)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-6);
        // +-20 margins in favor of the truth.
        let fg = t
            .to_dtype(DType::F32)
            .unwrap()
            .affine(40.0, -20.0)
            .unwrap()
            .unsqueeze(1)
            .unwrap();
        let logits = Tensor::cat(&[&fg.neg().unwrap(), &fg], 1).unwrap();
        assert!(
            cross_entropy(&logits, &t)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
                < 1e-6
        );
        let wrong = cross_entropy(&logits.neg().unwrap(), &t)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((wrong - 40.0).abs() < 1e-4);
        assert!(cross_entropy(&zeros, &t.reshape((1, 4, 1)).unwrap()).is_err());
    }

    #[test]
    fn pseudo_labels_are_detached_argmax() {
        let dev = Device::Cpu;
        let v = candle_core::Var::from_vec(
            vec![0f32, 1.0, 2.0, 2.0, 1.0, 0.0, 2.0, 3.0],
            (1, 2, 2, 2),
            &dev,
        )
        .unwrap();
        let labels = pseudo_label(v.as_tensor()).unwrap();
        assert_eq!(
            labels.flatten_all().unwrap().to_vec1::<u32>().unwrap(),
            vec![1, 0, 0, 1]
        );
        let shifted = pseudo_label(&(v.as_tensor() + 7.0).unwrap()).unwrap();
        assert_eq!(
            shifted.flatten_all().unwrap().to_vec1::<u32>().unwrap(),
            vec![1, 0, 0, 1]
        );
        assert!(!labels.track_op());
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            lambda_dsr: -1.0,
            gamma: 1.0
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            lambda_dsr: 0.1,
            gamma: f64::NAN
        }
        .validate()
        .is_err());
    }
}
