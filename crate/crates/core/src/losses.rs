//! Training objectives: the simplified noise-prediction loss, both sides of
//! the adversarial loss, and their weighted combination.
//!
//! All reductions accumulate in `f64`. Logit losses go through the
//! softplus identity `-log σ(z) = softplus(-z)` so they stay finite for any
//! finite logit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean of `(a - b)²`. Both slices must have equal length.
pub fn mse<S: Real>(a: &[S], b: &[S]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum();
    s / a.len() as f64
}

/// `mean(softplus(sign · x))`.
pub fn mean_softplus<S: Real>(x: &[S], sign: f64) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| softplus(sign * v.f64())).sum::<f64>() / x.len() as f64
}

/// Mean squared error between the drawn and the predicted noise.
pub fn ddpm_loss<S: Real>(eps: &[S], eps_pred: &[S]) -> Result<f64> {
    if eps.len() != eps_pred.len() {
        return Err(Error::Shape {
            op: "ddpm_loss",
            expected: vec![eps.len()],
            got: vec![eps_pred.len()],
        });
    }
    Ok(mse(eps, eps_pred))
}

/// Non-saturating generator loss `-mean log σ(fake)`.
pub fn adversarial_generator_loss<S: Real>(fake_logits: &[S]) -> f64 {
    mean_softplus(fake_logits, -1.0)
}

/// Binary cross-entropy with forward-process samples labelled real and
/// reverse-process samples labelled fake.
pub fn discriminator_loss<S: Real>(real_logits: &[S], fake_logits: &[S]) -> f64 {
    mean_softplus(real_logits, -1.0) + mean_softplus(fake_logits, 1.0)
}

pub fn addm_generator_objective(l_ddpm: f64, l_adv_gen: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda", format!("must be >= 0, got {lambda}")));
    }
    Ok(l_ddpm + lambda * l_adv_gen)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ddpm: f64,
    pub l_adv_gen: f64,
    pub l_disc: f64,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(l_ddpm: f64, l_adv_gen: f64, l_disc: f64, lambda: f64) -> Result<Self> {
        let l_total = addm_generator_objective(l_ddpm, l_adv_gen, lambda)?;
        let b = LossBreakdown {
            l_ddpm,
            l_adv_gen,
            l_disc,
            l_total,
            lambda,
        };
        b.check_finite()?;
        Ok(b)
    }

    /// Names the first non-finite term, if any.
    pub fn check_finite(&self) -> Result<()> {
        for (term, v) in [
            ("l_ddpm", self.l_ddpm),
            ("l_adv_gen", self.l_adv_gen),
            ("l_disc", self.l_disc),
            ("l_total", self.l_total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: format!("{term} = {v}"),
                });
            }
        }
        Ok(())
    }
}
