//! Training objectives for the counterfactual generator and discriminator.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;

/// Probability clamp for the flip objective.
pub const FLIP_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub adv: f64,
    pub flip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 10.0,
            adv: 1.0,
            flip: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub flip: f64,
    pub adv_g: f64,
    pub total: f64,
    pub weights: LossWeights,
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `mean[((1 − M) ⊙ (I − Î))²]` over pixels and channels. `M` is
/// `(b, 1, h, w)` and broadcasts over the channel axis.
pub fn weighted_recon_loss(image: &Tensor, generated: &Tensor, maps: &Tensor) -> Result<Tensor> {
    check_same(image, generated, "reconstruction")?;
    let (b, _, h, w) = image.dims4()?;
    if maps.dims() != [b, 1, h, w] {
        return Err(Error::shape(format!("attention {:?} for images {:?}", maps.dims(), image.dims())));
    }
    let keep = maps.affine(-1.0, 1.0)?;
    Ok((image - generated)?.broadcast_mul(&keep)?.sqr()?.mean_all()?)
}

/// `log(clamp(p_A, ε, 1 − ε))`, averaged over the batch.
///
/// Takes logits so the log-probability is computed stably. Below `ε` the
/// clamp is a true clamp (zero gradient). At the top the value is clamped
/// but the gradient of `log p_A` passes through, so a confidently held
/// answer still receives a push.
pub fn flip_loss(logits: &Tensor, answers: &[usize]) -> Result<Tensor> {
    let (b, n) = logits.dims2()?;
    if answers.len() != b {
        return Err(Error::shape(format!("{} answers for batch {b}", answers.len())));
    }
    if let Some(&a) = answers.iter().find(|&&a| a >= n) {
        return Err(Error::AnswerOutOfRange { index: a, size: n });
    }
    let idx = Tensor::from_vec(
        answers.iter().map(|&a| a as u32).collect::<Vec<_>>(),
        (b, 1),
        logits.device(),
    )?;
    let log_p = nn::log_softmax_last(logits)?.gather(&idx, 1)?.squeeze(1)?;
    let lo = FLIP_EPS.ln();
    let hi = (1.0 - FLIP_EPS).ln();
    let floor = Tensor::full(lo, b, logits.device())?.to_dtype(logits.dtype())?;
    let v = log_p.maximum(&floor)?;
    let excess = (&v - hi)?.relu()?.detach();
    Ok((v - excess)?.mean_all()?)
}

/// Scalar form of [`flip_loss`] on a probability vector.
pub fn flip_loss_value(probabilities: &[f64], answer: usize) -> Result<f64> {
    let p = *probabilities.get(answer).ok_or(Error::AnswerOutOfRange {
        index: answer,
        size: probabilities.len(),
    })?;
    Ok(p.clamp(FLIP_EPS, 1.0 - FLIP_EPS).ln())
}

/// Mean binary cross-entropy of logits against a constant label.
pub fn bce_with_logits(logits: &Tensor, target_real: bool) -> Result<Tensor> {
    // BCE(x, 1) = softplus(−x); BCE(x, 0) = softplus(x).
    let x = if target_real { logits.neg()? } else { logits.clone() };
    Ok(nn::softplus(&x)?.mean_all()?)
}

pub fn discriminator_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    check_same(real, fake, "patch grids")?;
    Ok(((bce_with_logits(real, true)? + bce_with_logits(fake, false)?)? * 0.5)?)
}

/// Non-saturating generator term.
pub fn generator_adv_loss(fake: &Tensor) -> Result<Tensor> {
    bce_with_logits(fake, true)
}

/// `(d_loss, g_loss)` from patch logits on real and composited images.
pub fn adversarial_losses(real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((discriminator_loss(real, fake)?, generator_adv_loss(fake)?))
}

/// Weighted total on the autograd graph.
pub fn combine(recon: &Tensor, flip: &Tensor, adv_g: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(((recon * w.rec)? + (adv_g * w.adv)? + (flip * w.flip)?)?)
}

pub fn total_generator_loss(recon: f64, flip: f64, adv_g: f64, weights: LossWeights, step: usize) -> Result<LossBreakdown> {
    for (name, v) in [("recon", recon), ("flip", flip), ("adv_g", adv_g)] {
        if !v.is_finite() {
            return Err(Error::Divergence {
                step,
                what: name.into(),
            });
        }
    }
    Ok(LossBreakdown {
        recon,
        flip,
        adv_g,
        total: weights.rec * recon + weights.adv * adv_g + weights.flip * flip,
        weights,
    })
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
