//! Composition by decomposition: the composition generator, the decomposition
//! generator with its mask head, both discriminators, the joint objective and
//! the alternating training step.

use codegan_autograd::{impl_module, no_grad, Adam, Ctx, Module, Tensor, Var};
use rand::Rng;

use crate::batch::Batch;
use crate::config::{Config, DecTarget};
use crate::error::{Error, Result};
use crate::image::{stack, BinaryMask, Image, SegLabelMap, NUM_LABELS};
use crate::losses::{categorical_ce, discriminator_loss, gan_g_term, l1, one_hot};
use crate::metrics::{format_record, IouAccumulator, Metrics, OcclusionAccumulator};
use crate::nets::{Conditioned, Critic, Decoder, Encoder, PatchD, UNet};
use crate::rafn::RAFNModel;
use crate::scene::SceneExample;
use crate::stn::{stn_l1_loss, RelativeSTN};

#[derive(Clone, Debug)]
pub struct CoDeModel {
    pub g_comp: UNet,
    pub g_dec_encoder: Encoder,
    pub g_dec_decoder: Decoder,
    pub g_mask_decoder: Decoder,
    pub d_comp: PatchD,
    pub d_dec: PatchD,
}
impl_module!(CoDeModel {
    g_comp,
    g_dec_encoder,
    g_dec_decoder,
    g_mask_decoder,
    d_comp,
    d_dec
});

/// Decomposition network outputs for a batch of composites.
pub struct Decomposition {
    pub x_hat: Var,
    pub y_hat: Var,
    /// `[N, 3, H, W]` class probabilities over background, first, second.
    pub probs: Var,
}

impl CoDeModel {
    pub fn new(
        rng: &mut impl Rng,
        gen_filters: usize,
        gen_depth: usize,
        disc_filters: usize,
    ) -> Self {
        Self {
            g_comp: UNet::new(rng, 6, 3, gen_filters, gen_depth),
            g_dec_encoder: Encoder::new(rng, 3, gen_filters, gen_depth),
            g_dec_decoder: Decoder::new(rng, 6, gen_filters, gen_depth),
            g_mask_decoder: Decoder::new(rng, NUM_LABELS, gen_filters, gen_depth),
            d_comp: PatchD::new(rng, 9, disc_filters),
            d_dec: PatchD::new(rng, 6, disc_filters),
        }
    }

    pub fn compose_var(&self, x_t: &Var, y_t: &Var, ctx: &mut Ctx) -> Var {
        self.g_comp
            .forward(&Var::concat(&[x_t, y_t], 1), ctx)
            .tanh()
    }

    /// One encoder pass feeding both the image and the mask decoder.
    pub fn decompose_var(&self, c: &Var, ctx: &mut Ctx) -> Decomposition {
        let feats = self.g_dec_encoder.forward(c, ctx);
        let pair = self.g_dec_decoder.forward(&feats, ctx).tanh();
        let probs = self.g_mask_decoder.forward(&feats, ctx).softmax(1);
        Decomposition {
            x_hat: pair.narrow(1, 0, 3),
            y_hat: pair.narrow(1, 3, 3),
            probs,
        }
    }

    /// Parameter groups updated by the generator step, excluding the transformer.
    pub fn generator_groups(&self) -> [(&'static str, &dyn Module); 4] {
        [
            ("g_comp", &self.g_comp),
            ("g_dec_encoder", &self.g_dec_encoder),
            ("g_dec_decoder", &self.g_dec_decoder),
            ("g_mask_decoder", &self.g_mask_decoder),
        ]
    }
}

fn check_pair(x: &Image, y: &Image) -> Result<()> {
    if x.dims() != y.dims() || x.channels() != 3 || y.channels() != 3 {
        return Err(Error::Shape(format!(
            "object pair {:?} and {:?}",
            x.dims(),
            y.dims()
        )));
    }
    Ok(())
}

/// Eval-mode composite of two placed objects.
pub fn compose(model: &CoDeModel, x_t: &Image, y_t: &Image) -> Result<Image> {
    check_pair(x_t, y_t)?;
    let out = no_grad(|| {
        model.compose_var(
            &Var::constant(x_t.to_tensor()),
            &Var::constant(y_t.to_tensor()),
            &mut Ctx::eval(),
        )
    });
    Image::from_tensor(out.value(), 0)
}

/// Eval-mode decomposition of a composite into its two objects.
pub fn decompose(model: &CoDeModel, c_hat: &Image) -> Result<(Image, Image)> {
    if c_hat.channels() != 3 {
        return Err(Error::Shape(format!(
            "composite has {} channels",
            c_hat.channels()
        )));
    }
    let d = no_grad(|| model.decompose_var(&Var::constant(c_hat.to_tensor()), &mut Ctx::eval()));
    Ok((
        Image::from_tensor(d.x_hat.value(), 0)?,
        Image::from_tensor(d.y_hat.value(), 0)?,
    ))
}

/// Per-pixel argmax over the class axis of `[N, K, H, W]`; ties go to the
/// lower class index. Returns `[N, H, W]` labels.
pub fn argmax_labels(probs: &Tensor) -> Vec<u8> {
    let s = probs.shape();
    let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
    let d = probs.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * plane + p] > d[(b * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Eval-mode class probabilities `[1, 3, H, W]` and their argmax label map.
pub fn predict_masks(model: &CoDeModel, c_hat: &Image) -> Result<(Tensor, SegLabelMap)> {
    let d = no_grad(|| model.decompose_var(&Var::constant(c_hat.to_tensor()), &mut Ctx::eval()));
    let probs = d.probs.value().clone();
    let labels = SegLabelMap::new(c_hat.height(), c_hat.width(), argmax_labels(&probs))?;
    Ok((probs, labels))
}

/// Weights of the L1, mask and adversarial groups of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f32,
    pub lambda2: f32,
    pub lambda3: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 100.0,
            lambda2: 50.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            lambda3: cfg.lambda3,
        }
    }
}

/// Mean per-pixel cross-entropy of `probs` against `[N, H, W]` labels.
pub fn mask_ce_loss(probs: &Var, labels: &[u8]) -> Var {
    let s = probs.shape();
    categorical_ce(
        probs,
        &Var::constant(one_hot(labels, s[0], s[1], s[2], s[3])),
    )
}

fn composition_critic<'a>(d_comp: &'a dyn Critic, x_t: &Var, y_t: &Var) -> Conditioned<'a> {
    Conditioned {
        critic: d_comp,
        condition: Var::concat(&[x_t, y_t], 1),
    }
}

/// Scores `(ĉ, object)` pairs with both objects of a scene stacked on the batch axis.
fn decomposition_critic<'a>(d_dec: &'a dyn Critic, c_hat: &Var) -> Conditioned<'a> {
    Conditioned {
        critic: d_dec,
        condition: Var::concat(&[c_hat, c_hat], 0),
    }
}

/// Generator side of the composition adversarial loss.
pub fn composition_g_term(d_comp: &dyn Critic, x_t: &Var, y_t: &Var, c_hat: &Var) -> Var {
    gan_g_term(&composition_critic(d_comp, x_t, y_t).logits(c_hat))
}

/// Discriminator side with gradient penalty, and the unpenalized term.
pub fn composition_d_term(
    d_comp: &dyn Critic,
    x_t: &Var,
    y_t: &Var,
    c_real: &Var,
    c_hat: &Var,
    gp_weight: f32,
    rng: &mut impl Rng,
) -> (Var, Var) {
    let critic = composition_critic(d_comp, &x_t.detach(), &y_t.detach());
    discriminator_loss(&critic, c_real, c_hat, gp_weight, rng)
}

/// Generator side of the decomposition adversarial loss.
pub fn decomposition_g_term(d_dec: &dyn Critic, c_hat: &Var, x_hat: &Var, y_hat: &Var) -> Var {
    gan_g_term(&decomposition_critic(d_dec, c_hat).logits(&Var::concat(&[x_hat, y_hat], 0)))
}

#[allow(clippy::too_many_arguments)]
pub fn decomposition_d_term(
    d_dec: &dyn Critic,
    c_hat: &Var,
    x_c: &Var,
    y_c: &Var,
    x_hat: &Var,
    y_hat: &Var,
    gp_weight: f32,
    rng: &mut impl Rng,
) -> (Var, Var) {
    let critic = decomposition_critic(d_dec, &c_hat.detach());
    let real = Var::concat(&[x_c, y_c], 0);
    let fake = Var::concat(&[x_hat, y_hat], 0);
    discriminator_loss(&critic, &real, &fake, gp_weight, rng)
}

/// `(generator side, discriminator side with penalty)` of the composition cGAN.
pub fn gan_losses_composition(
    d_comp: &dyn Critic,
    x_t: &Var,
    y_t: &Var,
    c_real: &Var,
    c_hat: &Var,
    gp_weight: f32,
    rng: &mut impl Rng,
) -> (Var, Var) {
    let g = composition_g_term(d_comp, x_t, y_t, c_hat);
    let (d, _) = composition_d_term(d_comp, x_t, y_t, c_real, c_hat, gp_weight, rng);
    (g, d)
}

/// `(generator side, discriminator side with penalty)` of the decomposition cGAN.
#[allow(clippy::too_many_arguments)]
pub fn gan_losses_decomposition(
    d_dec: &dyn Critic,
    c_hat: &Var,
    x_c: &Var,
    y_c: &Var,
    x_hat: &Var,
    y_hat: &Var,
    gp_weight: f32,
    rng: &mut impl Rng,
) -> (Var, Var) {
    let g = decomposition_g_term(d_dec, c_hat, x_hat, y_hat);
    let (d, _) = decomposition_d_term(d_dec, c_hat, x_c, y_c, x_hat, y_hat, gp_weight, rng);
    (g, d)
}

/// Everything the objective needs from one forward pass.
pub struct CoDeForward {
    pub x_t: Var,
    pub y_t: Var,
    pub c_hat: Var,
    pub x_hat: Var,
    pub y_hat: Var,
    pub probs: Var,
}

/// Supervision for one batch.
pub struct Targets {
    pub c: Var,
    /// `[N, H, W]`.
    pub labels: Vec<u8>,
    pub x_c: Var,
    pub y_c: Var,
}

impl Targets {
    pub fn from_batch(b: &Batch) -> Self {
        Self {
            c: Var::constant(b.c.clone()),
            labels: b.labels.clone(),
            x_c: Var::constant(b.x_c.clone()),
            y_c: Var::constant(b.y_c.clone()),
        }
    }
}

/// The weighted generator objective and each unweighted term.
pub fn generator_loss_terms(
    d_comp: &dyn Critic,
    d_dec: &dyn Critic,
    f: &CoDeForward,
    t: &Targets,
    weights: LossWeights,
    dec_target: DecTarget,
) -> (Var, Metrics) {
    let l1_comp = l1(&f.c_hat, &t.c);
    let dec_pair = Var::concat(&[&f.x_hat, &f.y_hat], 1);
    let dec_goal = match dec_target {
        DecTarget::Inputs => Var::concat(&[&f.x_t, &f.y_t], 1).detach(),
        DecTarget::GroundTruth => Var::concat(&[&t.x_c, &t.y_c], 1),
    };
    let l1_dec = l1(&dec_pair, &dec_goal);
    let l1_stn = stn_l1_loss(&f.x_t, &f.y_t, &t.x_c, &t.y_c);
    let ce = mask_ce_loss(&f.probs, &t.labels);
    let g_comp = composition_g_term(d_comp, &f.x_t, &f.y_t, &f.c_hat);
    let g_dec = decomposition_g_term(d_dec, &f.c_hat, &f.x_hat, &f.y_hat);

    let total = l1_comp
        .add(&l1_dec)
        .add(&l1_stn)
        .mul_scalar(weights.lambda1)
        .add(&ce.mul_scalar(weights.lambda2))
        .add(&g_comp.add(&g_dec).mul_scalar(weights.lambda3));
    let mut m = Metrics::new();
    for (k, v) in [
        ("l1_comp", &l1_comp),
        ("l1_dec", &l1_dec),
        ("l1_stn", &l1_stn),
        ("ce_mask", &ce),
        ("gan_comp_g", &g_comp),
        ("gan_dec_g", &g_dec),
        ("g_total", &total),
    ] {
        m.insert(k.to_string(), v.item());
    }
    (total, m)
}

/// The full pipeline: optional frozen view synthesis, the relative
/// transformer, and the CoDe networks.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub stn: RelativeSTN,
    pub rafn: Option<RAFNModel>,
    pub code: CoDeModel,
}
impl_module!(Pipeline { stn, rafn, code });

impl Pipeline {
    pub fn new(rng: &mut impl Rng, cfg: &Config) -> Self {
        let stn = RelativeSTN::new(rng, cfg.image_size, &cfg.stn_channels, cfg.stn_hidden);
        let rafn = cfg.use_rafn.then(|| RAFNModel::new(rng, &cfg.rafn_widths));
        let code = CoDeModel::new(rng, cfg.gen_filters, cfg.gen_depth, cfg.disc_filters);
        Self { stn, rafn, code }
    }

    /// The first object as fed to the transformer: re-rendered by the frozen
    /// view network at the second object's viewpoint when one is present.
    pub fn place_input(&self, x: &Var, mask_y: &Var, background: f32) -> Result<Var> {
        match &self.rafn {
            Some(rafn) => Ok(
                no_grad(|| rafn.forward(x, mask_y, background, &Ctx::eval()))?
                    .x_synth
                    .detach(),
            ),
            None => Ok(x.clone()),
        }
    }

    /// Places both objects.
    pub fn place(&self, x: &Var, y: &Var, mask_y: &Var, background: f32) -> Result<(Var, Var)> {
        let x = self.place_input(x, mask_y, background)?;
        let out = self.stn.forward(&x, y, background)?;
        Ok((out.x_t, out.y_t))
    }

    pub fn forward(&self, batch: &Batch, background: f32, ctx: &mut Ctx) -> Result<CoDeForward> {
        let mask_y = Var::constant(batch.mask_y.clone());
        let (x_t, y_t) = self.place(
            &Var::constant(batch.x.clone()),
            &Var::constant(batch.y.clone()),
            &mask_y,
            background,
        )?;
        let c_hat = self.code.compose_var(&x_t, &y_t, ctx);
        let d = self.code.decompose_var(&c_hat, ctx);
        Ok(CoDeForward {
            x_t,
            y_t,
            c_hat,
            x_hat: d.x_hat,
            y_hat: d.y_hat,
            probs: d.probs,
        })
    }
}

/// Generator objective of a pipeline on one batch.
pub fn full_generator_loss(
    pipeline: &Pipeline,
    batch: &Batch,
    weights: LossWeights,
    dec_target: DecTarget,
    background: f32,
    ctx: &mut Ctx,
) -> Result<(Var, Metrics)> {
    let f = pipeline.forward(batch, background, ctx)?;
    let t = Targets::from_batch(batch);
    Ok(generator_loss_terms(
        &pipeline.code.d_comp,
        &pipeline.code.d_dec,
        &f,
        &t,
        weights,
        dec_target,
    ))
}

/// Alternating updates: both discriminators, then every generator and the
/// transformer jointly.
pub struct CoDeTrainer {
    pub opt_g: Adam,
    pub opt_stn: Adam,
    pub opt_d: Adam,
    pub weights: LossWeights,
    pub gp_weight: f32,
    pub dec_target: DecTarget,
    pub background: f32,
    pub steps: u64,
}

impl CoDeTrainer {
    pub fn new(cfg: &Config) -> Self {
        Self {
            opt_g: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
            opt_stn: Adam::new(cfg.stn_lr, cfg.beta1, cfg.beta2),
            opt_d: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
            weights: LossWeights::from_config(cfg),
            gp_weight: cfg.gp_weight,
            dec_target: cfg.dec_target,
            background: cfg.background_value,
            steps: 0,
        }
    }

    /// One discriminator update then one generator update. Metrics are taken
    /// before the updates. Any non-finite metric aborts with the full record.
    pub fn step(&mut self, pipeline: &Pipeline, batch: &Batch, ctx: &mut Ctx) -> Result<Metrics> {
        let code = &pipeline.code;
        let f = pipeline.forward(batch, self.background, ctx)?;
        let t = Targets::from_batch(batch);

        let (d_comp, d_comp_adv) = composition_d_term(
            &code.d_comp,
            &f.x_t,
            &f.y_t,
            &t.c,
            &f.c_hat,
            self.gp_weight,
            ctx.rng(),
        );
        let (d_dec, d_dec_adv) = decomposition_d_term(
            &code.d_dec,
            &f.c_hat,
            &t.x_c,
            &t.y_c,
            &f.x_hat,
            &f.y_hat,
            self.gp_weight,
            ctx.rng(),
        );
        let d_loss = d_comp.add(&d_dec);
        let mut metrics = Metrics::new();
        metrics.insert("d_comp".into(), d_comp_adv.item());
        metrics.insert("d_dec".into(), d_dec_adv.item());
        metrics.insert("d_total".into(), d_loss.item());
        self.check(&metrics)?;
        self.opt_d.step(
            &[("d_comp", &code.d_comp), ("d_dec", &code.d_dec)],
            &d_loss.backward(),
        );

        let (g_loss, g_metrics) = generator_loss_terms(
            &code.d_comp,
            &code.d_dec,
            &f,
            &t,
            self.weights,
            self.dec_target,
        );
        metrics.extend(g_metrics);
        self.check(&metrics)?;
        let grads = g_loss.backward();
        self.opt_g.step(&code.generator_groups(), &grads);
        self.opt_stn.step(&[("stn", &pipeline.stn)], &grads);
        self.steps += 1;
        Ok(metrics)
    }

    fn check(&self, metrics: &Metrics) -> Result<()> {
        if metrics.values().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Divergence {
                step: self.steps,
                detail: format_record(self.steps, metrics),
            })
        }
    }
}

/// Held-out scores of a trained pipeline.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// Mean absolute error between the generated and the true composite.
    pub l1_composite: f32,
    /// IoU of background, first and second object, aggregated over all scenes.
    pub iou: [f32; NUM_LABELS],
    /// Label accuracy on pixels covered by both full objects.
    pub occlusion_accuracy: f32,
    /// Mean absolute error of `decompose(compose(x_t, y_t))` against `(x_t, y_t)`.
    pub self_consistency: f32,
    pub scenes: usize,
}

/// Eval-mode scores over complete scenes, in chunks of `batch_size`.
pub fn evaluate(
    pipeline: &Pipeline,
    scenes: &[SceneExample],
    background: f32,
    batch_size: usize,
) -> Result<EvalReport> {
    let mut iou = IouAccumulator::default();
    let mut occ = OcclusionAccumulator::default();
    let (mut l1_sum, mut sc_sum, mut n) = (0.0f64, 0.0f64, 0usize);
    for chunk in scenes.chunks(batch_size.max(1)) {
        let refs: Vec<&SceneExample> = chunk.iter().collect();
        let batch = Batch::from_scenes(&refs)?;
        let f = no_grad(|| pipeline.forward(&batch, background, &mut Ctx::eval()))?;
        let k = chunk.len() as f64;
        l1_sum += l1(&f.c_hat, &Var::constant(batch.c.clone())).item() as f64 * k;
        let pair = Var::concat(&[&f.x_hat, &f.y_hat], 1);
        sc_sum += l1(&pair, &Var::concat(&[&f.x_t, &f.y_t], 1)).item() as f64 * k;
        n += chunk.len();

        let pred = argmax_labels(f.probs.value());
        iou.add(&pred, &batch.labels);
        let plane = batch.labels.len() / chunk.len();
        for (i, s) in chunk.iter().enumerate() {
            let (Some(xc), Some(yc)) = (&s.x_c, &s.y_c) else {
                continue;
            };
            let overlap = BinaryMask::foreground_of(xc, background)
                .and(&BinaryMask::foreground_of(yc, background));
            let r = i * plane..(i + 1) * plane;
            occ.add(&pred[r.clone()], &batch.labels[r], overlap.data());
        }
    }
    Ok(EvalReport {
        l1_composite: (l1_sum / n.max(1) as f64) as f32,
        iou: [iou.iou(0), iou.iou(1), iou.iou(2)],
        occlusion_accuracy: occ.accuracy(),
        self_consistency: (sc_sum / n.max(1) as f64) as f32,
        scenes: n,
    })
}

/// Eval-mode result of the whole pipeline on one object pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub x_t: Image,
    pub y_t: Image,
    pub c_hat: Image,
    pub labels: SegLabelMap,
}

pub fn infer(
    pipeline: &Pipeline,
    x: &Image,
    y: &Image,
    mask_y: &BinaryMask,
    background: f32,
) -> Result<Inference> {
    check_pair(x, y)?;
    let (x_t, y_t) = no_grad(|| {
        pipeline.place(
            &Var::constant(stack(&[x])?),
            &Var::constant(stack(&[y])?),
            &Var::constant(mask_y.to_tensor()),
            background,
        )
    })?;
    let (x_t, y_t) = (
        Image::from_tensor(x_t.value(), 0)?,
        Image::from_tensor(y_t.value(), 0)?,
    );
    let c_hat = compose(&pipeline.code, &x_t, &y_t)?;
    let (_, labels) = predict_masks(&pipeline.code, &c_hat)?;
    Ok(Inference {
        x_t,
        y_t,
        c_hat,
        labels,
    })
}
