use std::path::Path;

use anyhow::{bail, Context, Result};
use codegan_core::baseline::{EncoderFeatures, FeatureExtractor, NeighborIndex, PixelFeatures};
use codegan_core::checkpoint::{
    load_code, load_inpaint, load_rafn, save_code, save_inpaint, save_rafn,
};
use codegan_core::code::{evaluate, infer as infer_pair, Pipeline};
use codegan_core::config::Config;
use codegan_core::data::{
    augment_flip, generate_toy_dataset, generate_view_samples, load_dataset, save_dataset,
    DatasetBundle, ObjectRecord, PairingMode, ViewpointSpec,
};
use codegan_core::esmr::{refine, EsmrSettings};
use codegan_core::image::{BinaryMask, Image};
use codegan_core::inpaint::{convert_bundle, make_occluded, InpaintModel, OcclusionSampler};
use codegan_core::io::{labels_preview, load_image, load_mask, save_image, save_labels, tile};
use codegan_core::metrics::{Metrics, MetricsLog};
use codegan_core::rafn::{rafn_forward, RAFNModel};
use codegan_core::scene::SceneExample;
use codegan_core::train::{self, CodeRun, Hooks};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::run_dir::{due, resolve_config, RunDir};
use crate::{ConfigArgs, Domain, Extractor};

/// `n` indices spread evenly over `0..len`.
fn spread(len: usize, n: usize) -> Vec<usize> {
    let n = n.min(len);
    (0..n).map(|i| i * len / n).collect()
}

fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let (bundle, report) = load_dataset(dir)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(bundle)
}

fn metrics(pairs: &[(&str, f32)]) -> Metrics {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

pub fn make_data(args: &ConfigArgs, out: &Path, n: usize, mode: PairingMode) -> Result<()> {
    let cfg = resolve_config(args)?;
    let bundle = generate_toy_dataset(&cfg.layout, n, cfg.seed, mode, cfg.image_size)?;
    save_dataset(&bundle, out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    println!(
        "X={} Y={} C={} checksum={}",
        bundle.x.len(),
        bundle.y.len(),
        bundle.c.len(),
        bundle.checksum()
    );
    Ok(())
}

/// Logs every step and saves a checkpoint at the configured interval.
struct Logged<'a, F> {
    run: &'a mut RunDir,
    every: usize,
    save: F,
}

impl<M, F: FnMut(&Path, u64, &M) -> codegan_core::Result<()>> Hooks<M> for Logged<'_, F> {
    fn on_step(&mut self, step: u64, m: &Metrics, model: &M) -> codegan_core::Result<()> {
        self.run.log(step, m)?;
        if due(step, self.every) {
            (self.save)(&self.run.checkpoint(step + 1), step + 1, model)?;
        }
        Ok(())
    }
}

pub fn train_rafn(args: &ConfigArgs, out: &Path, samples: usize) -> Result<()> {
    let cfg = resolve_config(args)?;
    let targets = cfg
        .layout
        .azimuths
        .iter()
        .map(|&a| ViewpointSpec::new(a))
        .collect::<codegan_core::Result<Vec<_>>>()?;
    let kind_y = *cfg
        .layout
        .kinds_b
        .first()
        .context("layout has no second-object kinds")?;
    let data = generate_view_samples(
        samples,
        cfg.seed,
        cfg.image_size,
        &cfg.layout.kinds_a,
        kind_y,
        None,
        &targets,
    )?;
    let mut run = RunDir::create(out, &cfg)?;
    let save = |p: &Path, step: u64, m: &RAFNModel| save_rafn(p, &cfg, step, m);
    let model = train::train_rafn(
        &cfg,
        &data,
        cfg.seed,
        &mut Logged {
            run: &mut run,
            every: cfg.checkpoint_every,
            save,
        },
    )?;

    let mut tiles = Vec::new();
    for s in data.iter().take(8) {
        let (synth, _, _) = rafn_forward(&model, &s.x_r, &s.y_mask, cfg.background_value)?;
        let mask = s.y_mask.to_image();
        let mask = Image::from_fn(mask.height(), mask.width(), 3, |y, x, _| mask.get(y, x, 0));
        tiles.extend([s.x_r.clone(), mask, synth, s.x_target.clone()]);
    }
    save_image(
        &run.root.join("samples/final.png"),
        &tile(&tiles, 4, cfg.background_value)?,
    )?;
    save_rafn(&run.final_checkpoint(), &cfg, cfg.rafn_steps as u64, &model)?;
    println!("wrote {}", run.final_checkpoint().display());
    Ok(())
}

fn domain_name(d: Domain) -> &'static str {
    match d {
        Domain::X => "x",
        Domain::Y => "y",
    }
}

pub fn train_inpaint(args: &ConfigArgs, data: &Path, domain: Domain, out: &Path) -> Result<()> {
    let cfg = resolve_config(args)?;
    let bundle = load_bundle(data)?;
    let (objects, others): (&[ObjectRecord], &[ObjectRecord]) = match domain {
        Domain::X => (&bundle.x, &bundle.y),
        Domain::Y => (&bundle.y, &bundle.x),
    };
    let occluders: Vec<BinaryMask> = others.iter().map(|o| o.mask.clone()).collect();
    let name = domain_name(domain);
    let mut run = RunDir::create(out, &cfg)?;
    let save = |p: &Path, step: u64, m: &InpaintModel| save_inpaint(p, name, &cfg, step, m);
    let model = train::train_inpaint(
        &cfg,
        objects,
        &occluders,
        cfg.seed,
        &mut Logged {
            run: &mut run,
            every: cfg.checkpoint_every,
            save,
        },
    )?;

    let sampler = OcclusionSampler::new(cfg.occluder_shift, cfg.background_value);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tiles = Vec::new();
    for i in spread(objects.len(), 8) {
        let (img, occ) = sampler.sample(&objects[i], &occluders[i % occluders.len()], &mut rng)?;
        let (masked, occ) = make_occluded(&img, &occ, cfg.background_value)?;
        tiles.extend([masked.clone(), model.complete(&masked, &occ)?, img]);
    }
    save_image(
        &run.root.join("samples/final.png"),
        &tile(&tiles, 3, cfg.background_value)?,
    )?;
    save_inpaint(
        &run.final_checkpoint(),
        name,
        &cfg,
        cfg.inpaint_steps as u64,
        &model,
    )?;
    println!("wrote {}", run.final_checkpoint().display());
    Ok(())
}

/// One grid row: inputs, placed objects, composite, predicted labels and the
/// true composite when known.
fn grid_row(
    pipeline: &Pipeline,
    cfg: &Config,
    x: &Image,
    y: &Image,
    mask_y: &BinaryMask,
    truth: Option<&Image>,
) -> codegan_core::Result<Vec<Image>> {
    let out = infer_pair(pipeline, x, y, mask_y, cfg.background_value)?;
    let blank = Image::filled(x.height(), x.width(), 3, cfg.background_value);
    Ok(vec![
        x.clone(),
        y.clone(),
        out.x_t,
        out.y_t,
        out.c_hat,
        labels_preview(&out.labels),
        truth.cloned().unwrap_or(blank),
    ])
}

fn scene_grid(
    pipeline: &Pipeline,
    cfg: &Config,
    scenes: &[&SceneExample],
) -> codegan_core::Result<Image> {
    let mut tiles = Vec::new();
    for s in scenes {
        tiles.extend(grid_row(
            pipeline,
            cfg,
            &s.x,
            &s.y,
            &s.mask_y,
            s.c.as_ref(),
        )?);
    }
    tile(&tiles, 7, cfg.background_value)
}

struct CodeHooks<'a> {
    cfg: &'a Config,
    run: RunDir,
    preview: Vec<&'a SceneExample>,
    eval: Option<(Vec<SceneExample>, MetricsLog)>,
}

impl Hooks<CodeRun> for CodeHooks<'_> {
    fn on_step(&mut self, step: u64, m: &Metrics, run: &CodeRun) -> codegan_core::Result<()> {
        self.run.log(step, m)?;
        if due(step, self.cfg.checkpoint_every) {
            save_code(&self.run.checkpoint(step + 1), self.cfg, run)?;
        }
        if due(step, self.cfg.sample_every) {
            let grid = scene_grid(&run.pipeline, self.cfg, &self.preview)?;
            save_image(&self.run.sample(step + 1), &grid)?;
        }
        Ok(())
    }

    fn on_epoch(&mut self, epoch: usize, run: &CodeRun) -> codegan_core::Result<()> {
        if let Some((scenes, log)) = &mut self.eval {
            let r = evaluate(
                &run.pipeline,
                scenes,
                self.cfg.background_value,
                self.cfg.batch_size,
            )?;
            let m = metrics(&[
                ("epoch", epoch as f32),
                ("l1_composite", r.l1_composite),
                ("iou_background", r.iou[0]),
                ("iou_x", r.iou[1]),
                ("iou_y", r.iou[2]),
                ("occlusion_accuracy", r.occlusion_accuracy),
                ("self_consistency", r.self_consistency),
            ]);
            log.write(run.trainer.steps, &m)?;
            eprintln!(
                "epoch {epoch}: l1={:.4} iou={:.3?} occlusion={:.3}",
                r.l1_composite, r.iou, r.occlusion_accuracy
            );
        }
        Ok(())
    }
}

fn paired_scenes(bundle: &DatasetBundle) -> Result<Vec<SceneExample>> {
    Ok((0..bundle.c.len())
        .map(|i| bundle.scene(i))
        .collect::<codegan_core::Result<_>>()?)
}

pub fn train_code(
    args: &ConfigArgs,
    data: &Path,
    out: &Path,
    rafn: Option<&Path>,
    inpaint: Option<(&Path, &Path)>,
    eval_data: Option<&Path>,
) -> Result<()> {
    let cfg = resolve_config(args)?;
    let mut bundle = load_bundle(data)?;
    if cfg.augment_flip {
        bundle = augment_flip(&bundle);
    }
    let run = RunDir::create(out, &cfg)?;
    let scenes = match bundle.mode {
        PairingMode::Paired => paired_scenes(&bundle)?,
        PairingMode::Unpaired | PairingMode::UnpairedIncomplete => {
            let Some((px, py)) = inpaint else {
                bail!(codegan_core::Error::Config(
                    "unpaired data needs --inpaint-x and --inpaint-y".into()
                ));
            };
            let (_, mx) = load_inpaint(px, "x")?;
            let (_, my) = load_inpaint(py, "y")?;
            let (scenes, warnings) = convert_bundle(
                &bundle,
                &mx,
                &my,
                cfg.layout.input_fill,
                cfg.background_value,
            )?;
            std::fs::write(run.root.join("warnings.txt"), warnings.join("\n"))?;
            if !warnings.is_empty() {
                eprintln!("{} composites skipped, see warnings.txt", warnings.len());
            }
            scenes
        }
    };
    let rafn_model = match (cfg.use_rafn, rafn) {
        (true, Some(p)) => Some(load_rafn(p)?.1),
        (true, None) => bail!(codegan_core::Error::Config(
            "use_rafn is set but --rafn was not given".into()
        )),
        (false, _) => None,
    };
    let eval = match eval_data {
        Some(dir) => Some((
            paired_scenes(&load_bundle(dir)?)?,
            MetricsLog::create(&run.root.join("eval.log"))?,
        )),
        None => None,
    };
    let preview: Vec<&SceneExample> = spread(scenes.len(), 4)
        .into_iter()
        .map(|i| &scenes[i])
        .collect();
    let mut hooks = CodeHooks {
        cfg: &cfg,
        run,
        preview,
        eval,
    };
    let result = train::train_code(&cfg, &scenes, rafn_model, &mut hooks)?;
    save_code(&hooks.run.final_checkpoint(), &cfg, &result)?;
    println!(
        "wrote {} after {} steps",
        hooks.run.final_checkpoint().display(),
        result.trainer.steps
    );
    Ok(())
}

pub fn infer(
    ckpt: &Path,
    x: &Path,
    y: &Path,
    mask_y: Option<&Path>,
    steps: Option<usize>,
    out_dir: &Path,
) -> Result<()> {
    let loaded = load_code(ckpt)?;
    let cfg = loaded.config;
    let (x, y) = (load_image(x)?, load_image(y)?);
    let mask_y = match mask_y {
        Some(p) => load_mask(p)?,
        None => BinaryMask::foreground_of(&y, cfg.background_value),
    };
    let mut settings = EsmrSettings::from_config(&cfg);
    if let Some(s) = steps {
        settings.steps = s;
    }
    let placed = infer_pair(&loaded.run.pipeline, &x, &y, &mask_y, cfg.background_value)?;
    let r = refine(
        &loaded.run.pipeline,
        &loaded.run.real_cache,
        &x,
        &y,
        &mask_y,
        &settings,
    )?;

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for (name, img) in [
        ("x_t", &placed.x_t),
        ("y_t", &placed.y_t),
        ("c_before", &r.c_before),
        ("c_after", &r.c_after),
        ("c_assembled", &r.c_assembled),
    ] {
        save_image(&out_dir.join(format!("{name}.png")), img)?;
    }
    save_labels(&out_dir.join("labels.png"), &r.labels)?;
    save_image(
        &out_dir.join("labels_preview.png"),
        &labels_preview(&r.labels),
    )?;
    let mut log = MetricsLog::create(&out_dir.join("consistency.log"))?;
    for (i, v) in r.consistency.iter().enumerate() {
        log.write(i as u64, &metrics(&[("consistency", *v)]))?;
    }
    let first = r.consistency.first().copied().unwrap_or(0.0);
    let last = r.consistency.last().copied().unwrap_or(0.0);
    println!(
        "steps={} consistency {first:.4} -> {last:.4}, mean |c_after - c_before| = {:.4}",
        settings.steps,
        r.c_after.mean_abs_diff(&r.c_before)
    );
    Ok(())
}

pub fn eval_nn(
    ckpt: &Path,
    train_dir: &Path,
    test_dir: &Path,
    extractor: Extractor,
    limit: usize,
    out_dir: &Path,
) -> Result<()> {
    let loaded = load_code(ckpt)?;
    let cfg = loaded.config;
    let pipeline = &loaded.run.pipeline;
    let train = load_bundle(train_dir)?;
    let test = load_bundle(test_dir)?;
    let encoder = EncoderFeatures(&pipeline.code);
    let ex: &dyn FeatureExtractor = match extractor {
        Extractor::Encoder => &encoder,
        Extractor::Pixels => &PixelFeatures,
    };
    let index = NeighborIndex::build(&train, ex)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut log = MetricsLog::create(&out_dir.join("nn.log"))?;
    let blank = Image::filled(cfg.image_size, cfg.image_size, 3, cfg.background_value);
    let (mut tiles, mut sums, mut n) = (Vec::new(), [0.0f64; 3], 0usize);
    for i in 0..limit.min(test.x.len()).min(test.y.len()) {
        let (x, y) = (&test.x[i].image, &test.y[i].image);
        let (j, dist) = index.query(x, y, ex)?;
        let nn = &train.c[j].image;
        let c_hat = infer_pair(pipeline, x, y, &test.y[i].mask, cfg.background_value)?.c_hat;
        let truth = (test.mode == PairingMode::Paired).then(|| &test.c[i].image);
        let mut m = metrics(&[
            ("index", j as f32),
            ("distance", dist as f32),
            ("l1_nn_model", nn.mean_abs_diff(&c_hat)),
        ]);
        if let Some(c) = truth {
            m.insert("l1_nn_truth".into(), nn.mean_abs_diff(c));
            m.insert("l1_model_truth".into(), c_hat.mean_abs_diff(c));
            sums[1] += nn.mean_abs_diff(c) as f64;
            sums[2] += c_hat.mean_abs_diff(c) as f64;
        }
        sums[0] += dist;
        n += 1;
        log.write(i as u64, &m)?;
        tiles.extend([
            x.clone(),
            y.clone(),
            nn.clone(),
            c_hat,
            truth.cloned().unwrap_or_else(|| blank.clone()),
        ]);
    }
    if n == 0 {
        bail!(codegan_core::Error::Invalid(
            "no test pairs to query".into()
        ));
    }
    save_image(
        &out_dir.join("nn_grid.png"),
        &tile(&tiles, 5, cfg.background_value)?,
    )?;
    let k = n as f64;
    if test.mode == PairingMode::Paired {
        println!(
            "queries={n} mean_distance={:.4} l1(nn, truth)={:.4} l1(model, truth)={:.4}",
            sums[0] / k,
            sums[1] / k,
            sums[2] / k
        );
    } else {
        println!("queries={n} mean_distance={:.4}", sums[0] / k);
    }
    Ok(())
}

pub fn emit_grid(ckpt: &Path, data: &Path, n: usize, out: &Path) -> Result<()> {
    let loaded = load_code(ckpt)?;
    let cfg = loaded.config;
    let bundle = load_bundle(data)?;
    let count = bundle.x.len().min(bundle.y.len());
    let mut tiles = Vec::new();
    for i in spread(count, n) {
        let truth = (bundle.mode == PairingMode::Paired).then(|| &bundle.c[i].image);
        tiles.extend(grid_row(
            &loaded.run.pipeline,
            &cfg,
            &bundle.x[i].image,
            &bundle.y[i].image,
            &bundle.y[i].mask,
            truth,
        )?);
    }
    if tiles.is_empty() {
        bail!(codegan_core::Error::Invalid(format!(
            "{} holds no pairs",
            data.display()
        )));
    }
    save_image(out, &tile(&tiles, 7, cfg.background_value)?)?;
    println!("wrote {}", out.display());
    Ok(())
}
