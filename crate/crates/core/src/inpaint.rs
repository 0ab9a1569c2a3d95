//! Self-supervised inpainting: one conditional GAN per object domain fills the
//! occluded part of an object cutout. Used to turn real composites into
//! complete object targets when no paired data exists.

use codegan_autograd::{impl_module, no_grad, Adam, Ctx, Var};
use rand::Rng;

use crate::data::{DatasetBundle, ObjectRecord};
use crate::error::{Error, Result};
use crate::image::{center_and_scale, BinaryMask, Image, Label, SegLabelMap};
use crate::losses::{discriminator_loss, gan_g_term, l1};
use crate::nets::{Conditioned, Critic, PatchD, UNet};
use crate::scene::SceneExample;
use crate::warp::{affine_grid, bilinear_sample, AffineParams};

#[derive(Clone, Debug)]
pub struct InpaintModel {
    pub generator: UNet,
    pub discriminator: PatchD,
}
impl_module!(InpaintModel {
    generator,
    discriminator
});

impl InpaintModel {
    pub fn new(
        rng: &mut impl Rng,
        gen_filters: usize,
        gen_depth: usize,
        disc_filters: usize,
    ) -> Self {
        Self {
            generator: UNet::new(rng, 4, 3, gen_filters, gen_depth),
            discriminator: PatchD::new(rng, 7, disc_filters),
        }
    }

    /// Raw completion in `[-1, 1]` before compositing with the known pixels.
    pub fn generate(&self, masked: &Var, occ: &Var, ctx: &mut Ctx) -> Var {
        self.generator
            .forward(&Var::concat(&[masked, occ], 1), ctx)
            .tanh()
    }

    /// `occ ⊙ generated + (1 − occ) ⊙ masked`.
    pub fn forward(&self, masked: &Var, occ: &Var, ctx: &mut Ctx) -> Var {
        composite_hole(&self.generate(masked, occ, ctx), masked, occ)
    }

    /// The discriminator conditioned on the corrupted input.
    /// Eval-mode fill of one occluded image.
    pub fn complete(&self, masked: &Image, occ: &BinaryMask) -> Result<Image> {
        let out = no_grad(|| {
            self.forward(
                &Var::constant(masked.to_tensor()),
                &Var::constant(occ.to_tensor()),
                &mut Ctx::eval(),
            )
        });
        Image::from_tensor(out.value(), 0)
    }

    pub fn critic<'a>(&'a self, masked: &Var, occ: &Var) -> Conditioned<'a> {
        Conditioned {
            critic: &self.discriminator,
            condition: Var::concat(&[masked, occ], 1),
        }
    }
}

/// Keeps known pixels bit-for-bit and takes generated values inside the hole.
pub fn composite_hole(generated: &Var, known: &Var, occ: &Var) -> Var {
    occ.mul(generated).add(&occ.rsub_scalar(1.0).mul(known))
}

/// Blanks the occluded pixels of `img` to `background`.
pub fn make_occluded(
    img: &Image,
    occluder: &BinaryMask,
    background: f32,
) -> Result<(Image, BinaryMask)> {
    if img.dims() != occluder.dims() {
        return Err(Error::Shape(format!(
            "image {:?} vs occluder {:?}",
            img.dims(),
            occluder.dims()
        )));
    }
    Ok((img.masked(&occluder.not(), background), occluder.clone()))
}

/// Generator and discriminator losses for one batch against an arbitrary critic.
///
/// `generated` is the composited output. The discriminator side includes the
/// gradient penalty when `gp_weight > 0`.
pub fn inpaint_loss_with(
    critic: &dyn Critic,
    generated: &Var,
    original: &Var,
    lambda: f32,
    gp_weight: f32,
    rng: &mut impl Rng,
) -> (Var, Var) {
    let mut g_loss = l1(generated, original);
    if lambda != 0.0 {
        g_loss = g_loss.add(&gan_g_term(&critic.logits(generated)).mul_scalar(lambda));
    }
    let (d_loss, _) = discriminator_loss(critic, original, generated, gp_weight, rng);
    (g_loss, d_loss)
}

/// `(g_loss, d_loss)` with the model's own discriminator.
pub fn inpaint_loss(
    model: &InpaintModel,
    masked: &Var,
    occ: &Var,
    original: &Var,
    lambda: f32,
    gp_weight: f32,
    ctx: &mut Ctx,
) -> (Var, Var) {
    let generated = model.forward(masked, occ, ctx);
    let critic = model.critic(masked, occ);
    let mut rng = ctx.rng().clone();
    inpaint_loss_with(&critic, &generated, original, lambda, gp_weight, &mut rng)
}

/// Mean absolute error inside the hole only, per hole pixel and channel.
pub fn hole_l1(generated: &Var, original: &Var, occ: &Var) -> f32 {
    let (g, o, m) = (generated.value(), original.value(), occ.value());
    let (n, c) = (g.shape()[0], g.shape()[1]);
    let plane = g.shape()[2] * g.shape()[3];
    let (mut sum, mut count) = (0.0f64, 0usize);
    for b in 0..n {
        for p in 0..plane {
            if m.data()[b * plane + p] > 0.5 {
                count += c;
                for ch in 0..c {
                    let i = (b * c + ch) * plane + p;
                    sum += (g.data()[i] - o.data()[i]).abs() as f64;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64) as f32
    }
}

/// Placement augmentation for inpainting training pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcclusionSampler {
    pub scale_range: (f32, f32),
    /// Object shift amplitude as a fraction of the image side.
    pub object_shift: f32,
    /// Occluder shift amplitude relative to the object, as a fraction of the side.
    pub occluder_shift: f32,
    pub background: f32,
}

impl OcclusionSampler {
    pub fn new(occluder_shift: f32, background: f32) -> Self {
        Self {
            scale_range: (0.6, 1.0),
            object_shift: 0.15,
            occluder_shift,
            background,
        }
    }

    fn place(
        &self,
        img: &Image,
        mask: &BinaryMask,
        s: f32,
        tx: f32,
        ty: f32,
    ) -> Result<(Image, BinaryMask)> {
        let (h, w) = img.dims();
        let theta = AffineParams::new([[1.0 / s, 0.0, -tx / s], [0.0, 1.0 / s, -ty / s]])?;
        let grid = affine_grid(&theta, h, w)?;
        let out = bilinear_sample(img, &grid, self.background)?;
        let soft = bilinear_sample(
            &Image::from_fn(h, w, 1, |y, x, _| mask.get(y, x) as u8 as f32),
            &grid,
            0.0,
        )?;
        Ok((out, BinaryMask::from_soft(h, w, soft.data())?))
    }

    /// One training pair: an object at a random scale and position, and an
    /// occluder mask placed near it.
    pub fn sample(
        &self,
        object: &ObjectRecord,
        occluder: &BinaryMask,
        rng: &mut impl Rng,
    ) -> Result<(Image, BinaryMask)> {
        let (lo, hi) = self.scale_range;
        let s = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let a = self.object_shift * 2.0;
        let (tx, ty) = if a > 0.0 {
            (rng.random_range(-a..=a), rng.random_range(-a..=a))
        } else {
            (0.0, 0.0)
        };
        let (image, _) = self.place(&object.image, &object.mask, s, tx, ty)?;
        let so = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let b = self.occluder_shift * 2.0;
        let (ox, oy) = if b > 0.0 {
            (rng.random_range(-b..=b), rng.random_range(-b..=b))
        } else {
            (0.0, 0.0)
        };
        let occ_img = Image::from_fn(occluder.height(), occluder.width(), 3, |_, _, _| 1.0);
        let (_, occ) = self.place(&occ_img, occluder, so, tx + ox, ty + oy)?;
        Ok((image, occ))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InpaintMetrics {
    pub l1: f32,
    pub hole_l1: f32,
    pub g_adv: f32,
    pub d_loss: f32,
}

/// Alternating discriminator and generator updates for one domain.
pub struct InpaintTrainer {
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub lambda: f32,
    pub gp_weight: f32,
}

impl InpaintTrainer {
    pub fn new(lr: f32, beta1: f32, beta2: f32, lambda: f32, gp_weight: f32) -> Self {
        Self {
            opt_g: Adam::new(lr, beta1, beta2),
            opt_d: Adam::new(lr, beta1, beta2),
            lambda,
            gp_weight,
        }
    }

    pub fn step(
        &mut self,
        model: &InpaintModel,
        masked: &Var,
        occ: &Var,
        original: &Var,
        ctx: &mut Ctx,
    ) -> Result<InpaintMetrics> {
        let generated = model.forward(masked, occ, ctx);
        let mut rng = ctx.rng().clone();
        let critic = model.critic(masked, occ);
        let mut metrics = InpaintMetrics {
            hole_l1: hole_l1(&generated, original, occ),
            ..Default::default()
        };

        if self.lambda != 0.0 {
            let (d_loss, _) =
                discriminator_loss(&critic, original, &generated, self.gp_weight, &mut rng);
            metrics.d_loss = d_loss.item();
            if !metrics.d_loss.is_finite() {
                return Err(Error::NonFinite("inpainting discriminator loss"));
            }
            self.opt_d
                .step(&[("d", &model.discriminator)], &d_loss.backward());
        }

        let recon = l1(&generated, original);
        let mut g_loss = recon.clone();
        if self.lambda != 0.0 {
            let adv = gan_g_term(&critic.logits(&generated));
            metrics.g_adv = adv.item();
            g_loss = g_loss.add(&adv.mul_scalar(self.lambda));
        }
        metrics.l1 = recon.item();
        if !g_loss.item().is_finite() {
            return Err(Error::NonFinite("inpainting generator loss"));
        }
        self.opt_g
            .step(&[("g", &model.generator)], &g_loss.backward());
        *ctx.rng() = rng;
        Ok(metrics)
    }
}

/// Output of completing both objects of one composite.
#[derive(Clone, Debug, PartialEq)]
pub struct Completed {
    pub x_c: Image,
    pub y_c: Image,
    pub mask_x: BinaryMask,
    pub mask_y: BinaryMask,
}

fn complete_one(
    model: &InpaintModel,
    c: &Image,
    own: &BinaryMask,
    other: &BinaryMask,
    margin: usize,
    background: f32,
) -> Result<(Image, BinaryMask)> {
    let occ = other.and(&own.bbox_mask(margin));
    let (cutout, occ) = make_occluded(&c.masked(own, background), &occ, background)?;
    let completed = model.complete(&cutout, &occ)?;
    let mask = own.or(&occ.and(&BinaryMask::foreground_of(&completed, background)));
    Ok((completed, mask))
}

/// Cuts both objects out of a composite and fills the part hidden by the
/// other object. Unoccluded pixels pass through unchanged.
pub fn convert_unpaired_to_paired(
    c: &Image,
    c_labels: &SegLabelMap,
    model_x: &InpaintModel,
    model_y: &InpaintModel,
    background: f32,
) -> Result<Completed> {
    if c.dims() != c_labels.dims() {
        return Err(Error::Shape(format!(
            "composite {:?} vs labels {:?}",
            c.dims(),
            c_labels.dims()
        )));
    }
    for label in [Label::First, Label::Second] {
        if !c_labels.contains(label as u8) {
            return Err(Error::Invalid(format!(
                "composite has no pixels of class {}",
                label as u8
            )));
        }
    }
    let mx = c_labels.mask_of(Label::First as u8);
    let my = c_labels.mask_of(Label::Second as u8);
    let margin = c.height().max(c.width()) / 8;
    let (x_c, mask_x) = complete_one(model_x, c, &mx, &my, margin, background)?;
    let (y_c, mask_y) = complete_one(model_y, c, &my, &mx, margin, background)?;
    Ok(Completed {
        x_c,
        y_c,
        mask_x,
        mask_y,
    })
}

/// Training scenes from completed composites: the completed objects become the
/// placement targets and their centered versions the inputs. Composites
/// missing a class are skipped with a warning.
pub fn convert_composites(
    composites: &[(Image, SegLabelMap)],
    model_x: &InpaintModel,
    model_y: &InpaintModel,
    input_fill: f32,
    background: f32,
) -> Result<(Vec<SceneExample>, Vec<String>)> {
    let mut scenes = Vec::new();
    let mut warnings = Vec::new();
    for (i, (c, labels)) in composites.iter().enumerate() {
        let done = match convert_unpaired_to_paired(c, labels, model_x, model_y, background) {
            Ok(done) => done,
            Err(Error::Invalid(reason)) => {
                warnings.push(format!("composite {i} skipped: {reason}"));
                continue;
            }
            Err(e) => return Err(e),
        };
        let (x, mask_x) = center_and_scale(
            &done.x_c.masked(&done.mask_x, background),
            &done.mask_x,
            input_fill,
            background,
        )?;
        let (y, mask_y) = center_and_scale(
            &done.y_c.masked(&done.mask_y, background),
            &done.mask_y,
            input_fill,
            background,
        )?;
        scenes.push(SceneExample {
            x,
            y,
            mask_x,
            mask_y,
            c: Some(c.clone()),
            c_labels: Some(labels.clone()),
            x_c: Some(done.x_c.masked(&done.mask_x, background)),
            y_c: Some(done.y_c.masked(&done.mask_y, background)),
            paired: true,
        });
    }
    Ok((scenes, warnings))
}

/// [`convert_composites`] over every composite of a bundle.
pub fn convert_bundle(
    bundle: &DatasetBundle,
    model_x: &InpaintModel,
    model_y: &InpaintModel,
    input_fill: f32,
    background: f32,
) -> Result<(Vec<SceneExample>, Vec<String>)> {
    let composites: Vec<(Image, SegLabelMap)> = bundle
        .c
        .iter()
        .map(|r| (r.image.clone(), r.labels.clone()))
        .collect();
    convert_composites(&composites, model_x, model_y, input_fill, background)
}
