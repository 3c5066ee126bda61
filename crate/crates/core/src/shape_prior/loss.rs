use candle_core::{Tensor, Var};
use rand::Rng;

use super::nets::Scorer;
use crate::autodiff::ensure_higher_order_grads;
use crate::error::{Error, Result};

/// Differentiable pieces of one critic evaluation.
pub struct CriticTerms {
    /// `E[D(fake)] - E[D(real)] + gp_weight * penalty`.
    pub loss: Tensor,
    /// The unweighted penalty.
    pub penalty: Tensor,
    pub mean_real: f64,
    pub mean_fake: f64,
}

fn check_finite(what: &str, t: &Tensor) -> Result<f64> {
    let v = t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            detail: format!("(value {v})"),
        })
    }
}

fn check_pair(real: &Tensor, fake: &Tensor) -> Result<()> {
    if real.dims() != fake.dims() {
        return Err(Error::ShapeMismatch(format!(
            "real {:?} vs fake {:?}",
            real.dims(),
            fake.dims()
        )));
    }
    Ok(())
}

/// `eps * real + (1 - eps) * fake` with one `eps ~ U[0, 1)` per sample.
/// Returns the interpolates (detached) and the drawn coefficients.
pub fn interpolates<R: Rng + ?Sized>(
    real: &Tensor,
    fake: &Tensor,
    rng: &mut R,
) -> Result<(Tensor, Vec<f64>)> {
    check_pair(real, fake)?;
    let b = real.dim(0)?;
    let eps: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let mut shape = vec![1usize; real.rank()];
    shape[0] = b;
    let e = Tensor::from_vec(eps.clone(), shape, real.device())?.to_dtype(real.dtype())?;
    let one_minus = (e.ones_like()? - &e)?;
    let mixed = (real.detach().broadcast_mul(&e)? + fake.detach().broadcast_mul(&one_minus)?)?;
    Ok((mixed.detach(), eps))
}

/// `E[(||grad_x D(x_hat)||_2 - 1)^2]` over interpolates of `real` and `fake`.
///
/// The result stays attached to the critic's parameters, so its backward pass
/// differentiates through the input gradient.
pub fn gradient_penalty<R: Rng + ?Sized>(
    critic: &dyn Scorer,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    ensure_higher_order_grads()?;
    let (mixed, _) = interpolates(real, fake, rng)?;
    let x_hat = Var::from_tensor(&mixed)?;
    let scores = critic.score(x_hat.as_tensor())?;
    let grads = scores.sum_all()?.backward()?;
    let b = real.dim(0)?;
    let norms = match grads.get(x_hat.as_tensor()) {
        Some(g) => g.reshape((b, ()))?.sqr()?.sum(1)?.sqrt()?,
        // The score does not depend on its input at all.
        None => Tensor::zeros(b, real.dtype(), real.device())?,
    };
    Ok((norms - 1.0)?.sqr()?.mean_all()?)
}

/// WGAN-GP critic objective.
pub fn critic_loss<R: Rng + ?Sized>(
    critic: &dyn Scorer,
    real: &Tensor,
    fake: &Tensor,
    gp_weight: f64,
    rng: &mut R,
) -> Result<CriticTerms> {
    check_pair(real, fake)?;
    let real_scores = critic.score(&real.detach())?.mean_all()?;
    let fake_scores = critic.score(&fake.detach())?.mean_all()?;
    let penalty = gradient_penalty(critic, real, fake, rng)?;
    let loss = ((&fake_scores - &real_scores)? + (&penalty * gp_weight)?)?;
    let mean_real = check_finite("critic score on real masks", &real_scores)?;
    let mean_fake = check_finite("critic score on generated masks", &fake_scores)?;
    check_finite("gradient penalty", &penalty)?;
    check_finite("critic loss", &loss)?;
    Ok(CriticTerms {
        loss,
        penalty,
        mean_real,
        mean_fake,
    })
}

/// `-E[D(fake)]`; gradients flow into `fake`.
pub fn generator_loss(critic: &dyn Scorer, fake: &Tensor) -> Result<Tensor> {
    Ok(critic.score(fake)?.mean_all()?.neg()?)
}
