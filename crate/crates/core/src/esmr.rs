//! Example-specific refinement: test-time fine-tuning of the composition and
//! decomposition image layers on a single object pair.

use codegan_autograd::{no_grad, Adam, Ctx, Module, Tensor, Var};

use crate::code::{
    argmax_labels, compose, composition_d_term, composition_g_term, decomposition_g_term,
    predict_masks, Pipeline,
};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::{assemble_composite, labels_to_masks, stack, BinaryMask, Image, SegLabelMap};
use crate::losses::{l1, masked_l1};

/// The refinement objective.
///
/// Returns `(total, consistency)` where `consistency` is the λ-weighted L1
/// portion and `total` adds the generator-side adversarial terms when given.
/// Masks are `[N, 1, H, W]` constants.
#[allow(clippy::too_many_arguments)]
pub fn esmr_loss(
    x_hat: &Var,
    y_hat: &Var,
    x_t: &Var,
    y_t: &Var,
    c_hat: &Var,
    m_x: &Var,
    m_y: &Var,
    lambda: f32,
    gan_terms: Option<&Var>,
) -> (Var, Var) {
    let consistency = l1(x_hat, x_t)
        .add(&masked_l1(c_hat, x_t, m_x))
        .add(&l1(y_hat, y_t))
        .add(&masked_l1(c_hat, y_t, m_y))
        .mul_scalar(lambda);
    let total = match gan_terms {
        Some(g) => consistency.add(g),
        None => consistency.clone(),
    };
    (total, consistency)
}

/// Refinement settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EsmrSettings {
    pub steps: usize,
    pub lambda: f32,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub update_d: bool,
    pub gp_weight: f32,
    pub background: f32,
    pub seed: u64,
}

impl EsmrSettings {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            steps: cfg.esmr_steps,
            lambda: cfg.esmr_lambda,
            lr: cfg.esmr_lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            update_d: cfg.esmr_update_d,
            gp_weight: cfg.gp_weight,
            background: cfg.background_value,
            seed: cfg.seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Refinement {
    pub c_before: Image,
    pub c_after: Image,
    pub labels: SegLabelMap,
    /// The placed inputs assembled under the predicted masks.
    pub c_assembled: Image,
    /// The λ-weighted consistency portion before each update, then after the last.
    pub consistency: Vec<f32>,
    /// The refined copy; the input pipeline is never modified.
    pub refined: Pipeline,
}

/// `[1, 1, H, W]` masks of the two object classes from class probabilities.
fn class_masks(probs: &Tensor) -> (Var, Var) {
    let labels = argmax_labels(probs);
    let (h, w) = (probs.shape()[2], probs.shape()[3]);
    let mask = |k: u8| {
        Var::constant(Tensor::new(
            &[1, 1, h, w],
            labels.iter().map(|&l| (l == k) as u8 as f32).collect(),
        ))
    };
    (mask(1), mask(2))
}

/// Fine-tunes a private copy of the composition generator and the
/// decomposition image decoder on one pair. The transformer, view network,
/// shared encoder, mask decoder and (unless enabled) discriminators stay fixed.
pub fn refine(
    pipeline: &Pipeline,
    real_cache: &[Image],
    x: &Image,
    y: &Image,
    mask_y: &BinaryMask,
    settings: &EsmrSettings,
) -> Result<Refinement> {
    if x.dims() != y.dims() || x.dims() != mask_y.dims() {
        return Err(Error::Shape(format!(
            "refinement inputs {:?}, {:?}, {:?}",
            x.dims(),
            y.dims(),
            mask_y.dims()
        )));
    }
    if settings.update_d && real_cache.is_empty() {
        return Err(Error::Checkpoint(
            "discriminator refinement needs cached real composites".into(),
        ));
    }
    let work = pipeline.clone();
    let (x_t, y_t) = no_grad(|| {
        work.place(
            &Var::constant(stack(&[x])?),
            &Var::constant(stack(&[y])?),
            &Var::constant(mask_y.to_tensor()),
            settings.background,
        )
    })?;
    let (x_t, y_t) = (x_t.detach(), y_t.detach());
    let (xt_img, yt_img) = (
        Image::from_tensor(x_t.value(), 0)?,
        Image::from_tensor(y_t.value(), 0)?,
    );
    let c_before = compose(&work.code, &xt_img, &yt_img)?;

    let code = &work.code;
    let mut opt = Adam::new(settings.lr, settings.beta1, settings.beta2);
    let mut opt_d = Adam::new(settings.lr, settings.beta1, settings.beta2);
    let mut gp_rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(settings.seed);
    let mut consistency = Vec::with_capacity(settings.steps + 1);
    let objective =
        |ctx: &mut Ctx| {
            let c_hat = code.compose_var(&x_t, &y_t, ctx);
            let d = code.decompose_var(&c_hat, ctx);
            let (m_x, m_y) = class_masks(d.probs.value());
            let gan = composition_g_term(&code.d_comp, &x_t, &y_t, &c_hat).add(
                &decomposition_g_term(&code.d_dec, &c_hat, &d.x_hat, &d.y_hat),
            );
            let (total, portion) = esmr_loss(
                &d.x_hat,
                &d.y_hat,
                &x_t,
                &y_t,
                &c_hat,
                &m_x,
                &m_y,
                settings.lambda,
                Some(&gan),
            );
            (total, portion, c_hat)
        };
    for step in 0..settings.steps {
        let mut ctx = Ctx::eval();
        let (total, portion, c_hat) = objective(&mut ctx);
        consistency.push(portion.item());
        if !total.item().is_finite() {
            return Err(Error::Divergence {
                step: step as u64,
                detail: "refinement loss is not finite".into(),
            });
        }
        if settings.update_d {
            let real = Var::constant(real_cache[step % real_cache.len()].to_tensor());
            let (d_loss, _) = composition_d_term(
                &code.d_comp,
                &x_t,
                &y_t,
                &real,
                &c_hat,
                settings.gp_weight,
                &mut gp_rng,
            );
            opt_d.step(&[("d_comp", &code.d_comp)], &d_loss.backward());
        }
        let grads = total.backward();
        opt.step(
            &[
                ("g_comp", &code.g_comp as &dyn Module),
                ("g_dec_decoder", &code.g_dec_decoder),
            ],
            &grads,
        );
    }
    consistency.push(no_grad(|| objective(&mut Ctx::eval()).1.item()));

    let c_after = compose(code, &xt_img, &yt_img)?;
    let (_, labels) = predict_masks(code, &c_after)?;
    let (m_x, m_y) = labels_to_masks(&labels);
    let c_assembled = assemble_composite(&xt_img, &yt_img, &m_x, &m_y, settings.background)?;
    Ok(Refinement {
        c_before,
        c_after,
        labels,
        c_assembled,
        consistency,
        refined: work,
    })
}
