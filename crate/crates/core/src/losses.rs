//! Training objectives: adversarial BCE (non-saturating generator form),
//! cycle consistency, L1 regression, and the two-sided gradient penalty.
//!
//! All losses are built from tape ops, so every one of them is
//! differentiable — the gradient penalty doubly so, since its value already
//! contains a gradient and the discriminator update differentiates through
//! it.
//!
//! BCE uses natural log through the numerically stable softplus form:
//! `BCE(z, 1) = softplus(-z)`, `BCE(z, 0) = softplus(z)`.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Elem, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Binding, Network, WeightSet};

/// Inside the gradient-norm square root; keeps the penalty differentiable
/// at zero gradient at the cost of ~2e-6 absolute error in that corner.
const GP_NORM_EPS: f64 = 1e-12;

/// Objective weights. `lambda_m < lambda_n` reflects the relaxed backward
/// cycle: a polygon mask legitimately maps to many plausible H&E images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_n: f64,
    pub lambda_m: f64,
    pub l1_weight: f64,
    pub gp_weight: f64,
    pub gp_enabled: bool,
}

impl LossWeights {
    /// Synthesis (cycle) training: no gradient penalty, relaxed backward cycle.
    pub fn synth_defaults() -> Self {
        LossWeights { lambda_n: 70.0, lambda_m: 10.0, l1_weight: 100.0, gp_weight: 10.0, gp_enabled: false }
    }

    /// Segmentation (conditional) training: gradient penalty on.
    pub fn seg_defaults() -> Self {
        LossWeights { lambda_n: 70.0, lambda_m: 10.0, l1_weight: 100.0, gp_weight: 10.0, gp_enabled: true }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_n", self.lambda_n),
            ("lambda_m", self.lambda_m),
            ("l1_weight", self.l1_weight),
            ("gp_weight", self.gp_weight),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_same_shape<E: Elem>(a: Tensor<'_, E>, b: Tensor<'_, E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

/// Discriminator objective: `mean BCE(real, 1) + mean BCE(fake, 0)` over
/// pre-sigmoid score maps.
pub fn gan_loss_discriminator<'t, E: Elem>(
    real_scores: Tensor<'t, E>,
    fake_scores: Tensor<'t, E>,
) -> Result<Tensor<'t, E>> {
    check_same_shape(real_scores, fake_scores)?;
    Ok(real_scores.neg().softplus().mean().add(fake_scores.softplus().mean()))
}

/// Non-saturating generator objective: `mean BCE(fake, 1)`.
pub fn gan_loss_generator<E: Elem>(fake_scores: Tensor<'_, E>) -> Tensor<'_, E> {
    fake_scores.neg().softplus().mean()
}

/// Cycle consistency (per-pixel mean L1, so lambdas are patch-size free):
/// `lambda_n * mean|G(S(n)) - n| + lambda_m * mean|S(G(m)) - m|`.
pub fn cycle_loss<'t, E: Elem>(
    m: Tensor<'t, E>,
    n: Tensor<'t, E>,
    s_g_m: Tensor<'t, E>,
    g_s_n: Tensor<'t, E>,
    w: &LossWeights,
) -> Result<Tensor<'t, E>> {
    check_same_shape(m, s_g_m)?;
    check_same_shape(n, g_s_n)?;
    let forward = g_s_n.sub(n).abs().mean().scale(E::c(w.lambda_n));
    let backward = s_g_m.sub(m).abs().mean().scale(E::c(w.lambda_m));
    Ok(forward.add(backward))
}

/// Mean absolute difference between prediction and ground truth.
pub fn l1_term<'t, E: Elem>(pred: Tensor<'t, E>, gt: Tensor<'t, E>) -> Result<Tensor<'t, E>> {
    check_same_shape(pred, gt)?;
    Ok(pred.sub(gt).abs().mean())
}

/// Gradient penalty on mask interpolates, conditioning held at the real
/// image: `(|| d mean D(image, x_hat) / d x_hat ||_2 - 1)^2` with
/// `x_hat = t*real_mask + (1-t)*fake_mask`, `t ~ U[0,1]` from `seed`.
///
/// The discriminator is any tape function of `(image, mask)`; the returned
/// scalar is differentiable in the discriminator parameters (the update
/// path), the masks, and the image.
pub fn gradient_penalty_with<'t, E: Elem, F>(
    binding: &Binding<'t, E>,
    disc_fn: F,
    real_image: &ArrayD<E>,
    real_mask: &ArrayD<E>,
    fake_mask: &ArrayD<E>,
    seed: u64,
) -> Result<Tensor<'t, E>>
where
    F: FnOnce(Tensor<'t, E>, Tensor<'t, E>) -> Result<Tensor<'t, E>>,
{
    if real_mask.shape() != fake_mask.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", real_mask.shape()),
            got: format!("{:?}", fake_mask.shape()),
        });
    }
    if real_mask.ndim() == 4 && real_mask.shape()[0] != 1 {
        return Err(Error::InvalidArgument(
            "gradient_penalty expects batch size 1 (one interpolate per pair)".into(),
        ));
    }
    let tape = binding.tape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t: f64 = rng.random_range(0.0..=1.0);
    let te = E::c(t);
    let one_minus = E::c(1.0 - t);
    let x_hat_val =
        real_mask.mapv(|v| v * te) + fake_mask.mapv(|v| v * one_minus);
    let x_hat = tape.leaf(x_hat_val);
    let image = tape.leaf(real_image.clone());
    let score = disc_fn(image, x_hat)?;
    let mean_score = score.mean();
    let grad = tape
        .backward(mean_score, &[x_hat])
        .pop()
        .flatten()
        .ok_or_else(|| Error::Numeric("discriminator ignores its mask input".into()))?;
    let norm = grad.sum_squares().add_scalar(E::c(GP_NORM_EPS)).sqrt();
    Ok(norm.add_scalar(-E::one()).mul(norm.add_scalar(-E::one())))
}

/// [`gradient_penalty_with`] applied to a concatenation-conditioned patch
/// discriminator. `fake_pair` carries the pooled conditioning image too,
/// but the penalty interpolates masks only.
pub fn gradient_penalty<'t, E: Elem>(
    disc: &Network,
    binding: &Binding<'t, E>,
    ws: &WeightSet<E>,
    real_pair: (&ArrayD<E>, &ArrayD<E>),
    fake_pair: (&ArrayD<E>, &ArrayD<E>),
    seed: u64,
) -> Result<Tensor<'t, E>> {
    let (real_image, real_mask) = real_pair;
    let (_fake_image, fake_mask) = fake_pair;
    gradient_penalty_with(
        binding,
        |image, mask| disc.forward(binding, ws, image.concat_channels(mask)),
        real_image,
        real_mask,
        fake_mask,
        seed,
    )
}
