//! Loss terms shared by every trainer. Adversarial terms take logits.

use codegan_autograd::{grad, Tensor, Var};
use rand::Rng;

use crate::nets::Critic;

/// Probability clamp keeping logarithms finite.
pub const PROB_EPS: f32 = 1e-7;

/// Mean absolute error over all elements.
pub fn l1(a: &Var, b: &Var) -> Var {
    a.sub(b).abs().mean()
}

/// Mean absolute error restricted by a `{0, 1}` mask, averaged over all elements.
pub fn masked_l1(a: &Var, b: &Var, mask: &Var) -> Var {
    a.sub(b).mul(mask).abs().mean()
}

/// Mean binary cross-entropy of probabilities against `{0, 1}` targets.
pub fn bce(prob: &Var, target: &Var) -> Var {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos = target.mul(&p.ln());
    let neg = target.rsub_scalar(1.0).mul(&p.rsub_scalar(1.0).ln());
    pos.add(&neg).neg().mean()
}

/// Mean categorical cross-entropy of `probs: [N, K, H, W]` against one-hot
/// targets of the same shape.
pub fn categorical_ce(probs: &Var, one_hot: &Var) -> Var {
    let k = probs.shape()[1] as f32;
    probs
        .clamp(PROB_EPS, 1.0)
        .ln()
        .mul(one_hot)
        .mean()
        .mul_scalar(-k)
}

/// One-hot `[N, K, H, W]` from per-pixel labels laid out `[N, H, W]`.
pub fn one_hot(labels: &[u8], n: usize, k: usize, h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; n * k * h * w];
    for b in 0..n {
        for p in 0..h * w {
            let l = labels[b * h * w + p] as usize;
            data[(b * k + l) * h * w + p] = 1.0;
        }
    }
    Tensor::new(&[n, k, h, w], data)
}

/// Generator side of the adversarial loss: `-log D(fake)` on logits.
pub fn gan_g_term(fake_logits: &Var) -> Var {
    fake_logits.neg().softplus().mean()
}

/// Discriminator side: average of `-log D(real)` and `-log(1 - D(fake))`.
pub fn gan_d_term(real_logits: &Var, fake_logits: &Var) -> Var {
    real_logits
        .neg()
        .softplus()
        .mean()
        .add(&fake_logits.softplus().mean())
        .mul_scalar(0.5)
}

/// Per-sample interpolation weights in `[0, 1)`.
pub fn interpolation_weights(rng: &mut impl Rng, n: usize) -> Tensor {
    Tensor::new(&[n, 1, 1, 1], (0..n).map(|_| rng.random::<f32>()).collect())
}

/// Mean over samples of `(‖∇ Σ logits‖₂ − 1)²` at `eps·real + (1 − eps)·fake`.
/// Differentiable in the critic's parameters.
pub fn gradient_penalty(critic: &dyn Critic, real: &Var, fake: &Var, eps: &Tensor) -> Var {
    let eps = Var::constant(eps.clone());
    let mixed = real
        .detach()
        .mul(&eps)
        .add(&fake.detach().mul(&eps.rsub_scalar(1.0)));
    let point = Var::leaf(mixed.value().clone());
    gradient_penalty_at(critic, &point)
}

/// The penalty evaluated at a fixed leaf point.
pub fn gradient_penalty_at(critic: &dyn Critic, point: &Var) -> Var {
    let score = critic.logits(point).sum();
    let g = grad(&score, &[point], true).remove(0);
    let rank = g.shape().len();
    let axes: Vec<usize> = (1..rank).collect();
    g.square()
        .sum_axes(&axes)
        .add_scalar(1e-12)
        .sqrt()
        .add_scalar(-1.0)
        .square()
        .mean()
}

/// Discriminator loss with penalty: `d_term + gp_weight · penalty`.
pub fn discriminator_loss(
    critic: &dyn Critic,
    real: &Var,
    fake: &Var,
    gp_weight: f32,
    rng: &mut impl Rng,
) -> (Var, Var) {
    let real = real.detach();
    let fake = fake.detach();
    let adv = gan_d_term(&critic.logits(&real), &critic.logits(&fake));
    if gp_weight == 0.0 {
        return (adv.clone(), adv);
    }
    let eps = interpolation_weights(rng, real.shape()[0]);
    let penalty = gradient_penalty(critic, &real, &fake, &eps);
    (adv.add(&penalty.mul_scalar(gp_weight)), adv)
}
