//! Training loops shared by the command line and the acceptance suite.

use codegan_autograd::{Adam, Ctx, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::{batches, epoch_order, Batch};
use crate::code::{CoDeTrainer, Pipeline};
use crate::config::Config;
use crate::data::{ObjectRecord, ViewSample};
use crate::error::{Error, Result};
use crate::image::{stack, BinaryMask, Image};
use crate::inpaint::{make_occluded, InpaintModel, InpaintTrainer, OcclusionSampler};
use crate::metrics::Metrics;
use crate::rafn::{RAFNModel, RafnTrainer};
use crate::scene::SceneExample;
use crate::stn::StnTrainer;

/// Callbacks invoked by the training loops. Every method defaults to a no-op.
pub trait Hooks<M> {
    fn on_step(&mut self, _step: u64, _metrics: &Metrics, _model: &M) -> Result<()> {
        Ok(())
    }

    /// Called after each full pass over the data, with the zero-based epoch.
    fn on_epoch(&mut self, _epoch: usize, _model: &M) -> Result<()> {
        Ok(())
    }
}

impl<M> Hooks<M> for () {}

/// Corrupted inputs, occlusion masks and originals for one inpainting batch.
pub fn occlusion_batch(
    objects: &[ObjectRecord],
    occluders: &[BinaryMask],
    sampler: &OcclusionSampler,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor, Tensor)> {
    if objects.is_empty() || occluders.is_empty() {
        return Err(Error::Invalid(
            "inpainting needs objects and occluder masks".into(),
        ));
    }
    let (mut masked, mut occs, mut originals) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let obj = &objects[rng.random_range(0..objects.len())];
        let occ = &occluders[rng.random_range(0..occluders.len())];
        let (img, occ) = sampler.sample(obj, occ, rng)?;
        let (m, occ) = make_occluded(&img, &occ, sampler.background)?;
        masked.push(m);
        occs.push(occ.to_tensor());
        originals.push(img);
    }
    let occ_refs: Vec<&Tensor> = occs.iter().collect();
    Ok((
        stack(&masked.iter().collect::<Vec<_>>())?,
        Tensor::concat(&occ_refs, 0),
        stack(&originals.iter().collect::<Vec<_>>())?,
    ))
}

/// Trains one domain's inpainting model with occluders from the other domain.
pub fn train_inpaint(
    cfg: &Config,
    objects: &[ObjectRecord],
    occluders: &[BinaryMask],
    seed: u64,
    hooks: &mut dyn Hooks<InpaintModel>,
) -> Result<InpaintModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = InpaintModel::new(&mut rng, cfg.gen_filters, cfg.gen_depth, cfg.disc_filters);
    let mut trainer = InpaintTrainer::new(
        cfg.lr,
        cfg.beta1,
        cfg.beta2,
        cfg.inpaint_lambda,
        cfg.gp_weight,
    );
    let sampler = OcclusionSampler::new(cfg.occluder_shift, cfg.background_value);
    let mut ctx = Ctx::train(seed.wrapping_add(1));
    for step in 0..cfg.inpaint_steps as u64 {
        let (m, o, g) = occlusion_batch(
            objects,
            occluders,
            &sampler,
            cfg.inpaint_batch_size,
            &mut rng,
        )?;
        let out = trainer.step(
            &model,
            &Var::constant(m),
            &Var::constant(o),
            &Var::constant(g),
            &mut ctx,
        )?;
        let metrics: Metrics = [
            ("l1", out.l1),
            ("hole_l1", out.hole_l1),
            ("gan_g", out.g_adv),
            ("d_total", out.d_loss),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        hooks.on_step(step, &metrics, &model)?;
    }
    Ok(model)
}

/// Stacked RAFN inputs and targets for the listed samples.
pub fn view_batch(samples: &[&ViewSample]) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let masks = |f: &dyn Fn(&ViewSample) -> &BinaryMask| {
        let t: Vec<Tensor> = samples.iter().map(|s| f(s).to_tensor()).collect();
        Tensor::concat(&t.iter().collect::<Vec<_>>(), 0)
    };
    Ok((
        stack(&samples.iter().map(|s| &s.x_r).collect::<Vec<_>>())?,
        masks(&|s| &s.y_mask),
        stack(&samples.iter().map(|s| &s.x_target).collect::<Vec<_>>())?,
        masks(&|s| &s.x_target_mask),
    ))
}

pub fn train_rafn(
    cfg: &Config,
    samples: &[ViewSample],
    seed: u64,
    hooks: &mut dyn Hooks<RAFNModel>,
) -> Result<RAFNModel> {
    if samples.is_empty() {
        return Err(Error::Invalid(
            "view synthesis needs training samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = RAFNModel::new(&mut rng, &cfg.rafn_widths);
    let mut trainer = RafnTrainer::new(
        Adam::new(cfg.rafn_lr, cfg.beta1, cfg.beta2),
        cfg.rafn_mask_weight,
        cfg.background_value,
    );
    let ctx = Ctx::train(seed);
    let mut step = 0u64;
    for epoch in 0.. {
        for idx in batches(
            &epoch_order(samples.len(), seed, epoch),
            cfg.rafn_batch_size,
        ) {
            if step == cfg.rafn_steps as u64 {
                return Ok(model);
            }
            let refs: Vec<&ViewSample> = idx.iter().map(|&i| &samples[i]).collect();
            let (x_r, y_mask, x_gt, fg_gt) = view_batch(&refs)?;
            let v = Var::constant;
            let out = trainer.step(&model, &v(x_r), &v(y_mask), &v(x_gt), &v(fg_gt), &ctx)?;
            let metrics: Metrics = [("l1", out.l1), ("bce", out.bce), ("total", out.total)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
            hooks.on_step(step, &metrics, &model)?;
            step += 1;
        }
        hooks.on_epoch(epoch, &model)?;
    }
    unreachable!("the epoch loop only exits by returning")
}

/// Result of a CoDe training run.
pub struct CodeRun {
    pub pipeline: Pipeline,
    pub trainer: CoDeTrainer,
    /// Real composites kept for the adversarial terms of test-time refinement.
    pub real_cache: Vec<Image>,
}

/// Scenes a CoDe batch can be built from.
fn complete(scenes: &[SceneExample]) -> Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        if s.c.is_none() || s.c_labels.is_none() || s.x_c.is_none() || s.y_c.is_none() {
            return Err(Error::Invalid(format!(
                "training scene {i} has no composite targets"
            )));
        }
    }
    Ok(())
}

/// Optional transformer warm-up, then alternating CoDe updates for
/// `cfg.epochs` epochs or `cfg.max_steps` steps, whichever ends first.
pub fn train_code(
    cfg: &Config,
    scenes: &[SceneExample],
    rafn: Option<RAFNModel>,
    hooks: &mut dyn Hooks<CodeRun>,
) -> Result<CodeRun> {
    if scenes.is_empty() {
        return Err(Error::Invalid("no training scenes".into()));
    }
    complete(scenes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pipeline = Pipeline::new(&mut rng, cfg);
    if cfg.use_rafn {
        pipeline.rafn =
            Some(rafn.ok_or_else(|| {
                Error::Invalid("use_rafn is set but no view model was given".into())
            })?);
    }
    let batch_of =
        |idx: &[usize]| Batch::from_scenes(&idx.iter().map(|&i| &scenes[i]).collect::<Vec<_>>());

    if cfg.stn_pretrain_steps > 0 {
        let mut stn = StnTrainer::new(cfg.stn_lr, cfg.beta1, cfg.beta2, cfg.background_value);
        let mut done = 0;
        'warm: for epoch in 0.. {
            for idx in batches(
                &epoch_order(scenes.len(), cfg.seed ^ 0x5354, epoch),
                cfg.batch_size,
            ) {
                if done == cfg.stn_pretrain_steps {
                    break 'warm;
                }
                let b = batch_of(&idx)?;
                let mask_y = Var::constant(b.mask_y.clone());
                let x = match &pipeline.rafn {
                    Some(_) => pipeline.place_input(
                        &Var::constant(b.x.clone()),
                        &mask_y,
                        cfg.background_value,
                    )?,
                    None => Var::constant(b.x.clone()),
                };
                stn.step(
                    &pipeline.stn,
                    &x,
                    &Var::constant(b.y),
                    &Var::constant(b.x_c),
                    &Var::constant(b.y_c),
                )?;
                done += 1;
            }
        }
    }

    let real_cache: Vec<Image> = epoch_order(scenes.len(), cfg.seed, 0)
        .into_iter()
        .take(cfg.real_cache_size)
        .filter_map(|i| scenes[i].c.clone())
        .collect();
    let mut run = CodeRun {
        pipeline,
        trainer: CoDeTrainer::new(cfg),
        real_cache,
    };
    let mut ctx = Ctx::train(cfg.seed);
    'train: for epoch in 0..cfg.epochs {
        for idx in batches(&epoch_order(scenes.len(), cfg.seed, epoch), cfg.batch_size) {
            if cfg.max_steps > 0 && run.trainer.steps >= cfg.max_steps as u64 {
                break 'train;
            }
            let step = run.trainer.steps;
            let metrics = run
                .trainer
                .step(&run.pipeline, &batch_of(&idx)?, &mut ctx)?;
            hooks.on_step(step, &metrics, &run)?;
        }
        hooks.on_epoch(epoch, &run)?;
    }
    Ok(run)
}
