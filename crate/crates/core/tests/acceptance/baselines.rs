use codegan_core::baseline::{
    nearest_index, nearest_neighbor, EncoderFeatures, FeatureExtractor, PixelFeatures,
};
use codegan_core::code::CoDeModel;
use codegan_core::config::Config;
use codegan_core::data::{
    generate_toy_dataset, generate_view_samples, load_dataset, save_dataset, DatasetBundle,
    PairingMode, ViewpointSpec,
};
use codegan_core::image::Image;
use codegan_core::metrics::Metrics;
use codegan_core::train::{train_code, train_inpaint, train_rafn, Hooks};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::support::{paired_scenes, Check, Outcome, Shared};

/// Every step's metrics, in order.
#[derive(Default)]
struct Recorder(Vec<(u64, Metrics)>);

impl<M> Hooks<M> for Recorder {
    fn on_step(&mut self, step: u64, metrics: &Metrics, _: &M) -> codegan_core::Result<()> {
        self.0.push((step, metrics.clone()));
        Ok(())
    }
}

/// Largest metric difference between two runs, or `None` if their steps or
/// keys differ.
fn largest_gap(a: &Recorder, b: &Recorder) -> Option<f32> {
    if a.0.len() != b.0.len() {
        return None;
    }
    let mut gap = 0.0f32;
    for ((sa, ma), (sb, mb)) in a.0.iter().zip(&b.0) {
        if sa != sb || ma.keys().ne(mb.keys()) {
            return None;
        }
        for (k, va) in ma {
            gap = gap.max((va - mb[k]).abs());
        }
    }
    Some(gap)
}

fn repeat_part(what: &str, a: &Recorder, b: &Recorder) -> (bool, String) {
    match largest_gap(a, b) {
        Some(gap) => (
            a.0.len() == 10 && gap <= 1e-6,
            format!("{what}: {} steps, max metric gap {gap:.1e}", a.0.len()),
        ),
        None => (
            false,
            format!("{what}: runs logged different steps or keys"),
        ),
    }
}

type Runner<'a> = Box<dyn Fn(u64) -> codegan_core::Result<Recorder> + 'a>;

/// Pinned checksum of the 8-scene paired toy set from seed 2024.
const GOLDEN_CHECKSUM: &str = "ce2670c3efd1e8acc89dcc95ed6a58410c021b60f9614dc190981e611ca11efb";

pub fn determinism(_: &mut Shared) -> Check {
    let cfg = Config {
        max_steps: 10,
        inpaint_steps: 10,
        rafn_steps: 10,
        ..Config::default()
    };
    let scenes = paired_scenes(&cfg, 48, 5)?;
    let objects = generate_toy_dataset(&cfg.layout, 40, 6, PairingMode::Unpaired, cfg.image_size)?;
    let occluders: Vec<_> = objects.y.iter().map(|r| r.mask.clone()).collect();
    let targets = cfg
        .layout
        .azimuths
        .iter()
        .map(|&a| ViewpointSpec::new(a))
        .collect::<Result<Vec<_>, _>>()?;
    let kind_y = cfg.layout.kinds_b[0];
    let views = generate_view_samples(
        40,
        cfg.seed,
        cfg.image_size,
        &cfg.layout.kinds_a,
        kind_y,
        None,
        &targets,
    )?;

    let runners: Vec<(&str, Runner)> = vec![
        (
            "train-code",
            Box::new(|seed| {
                let mut rec = Recorder::default();
                train_code(
                    &Config {
                        seed,
                        ..cfg.clone()
                    },
                    &scenes,
                    None,
                    &mut rec,
                )?;
                Ok(rec)
            }),
        ),
        (
            "train-inpaint",
            Box::new(|seed| {
                let mut rec = Recorder::default();
                train_inpaint(&cfg, &objects.x, &occluders, seed, &mut rec)?;
                Ok(rec)
            }),
        ),
        (
            "train-rafn",
            Box::new(|seed| {
                let mut rec = Recorder::default();
                train_rafn(&cfg, &views, seed, &mut rec)?;
                Ok(rec)
            }),
        ),
    ];
    let mut parts = Vec::new();
    for (what, run) in &runners {
        let (a, b) = (run(cfg.seed)?, run(cfg.seed)?);
        parts.push(repeat_part(what, &a, &b));
        let other = run(cfg.seed + 1)?;
        let differs = largest_gap(&a, &other).is_none_or(|g| g > 0.0);
        parts.push((differs, format!("{what}: another seed changes the metrics")));
    }

    let dir = tempfile::tempdir()?;
    let mut stable = true;
    for mode in [PairingMode::Paired, PairingMode::Unpaired] {
        let a = generate_toy_dataset(&cfg.layout, 8, 2024, mode, cfg.image_size)?;
        let b = generate_toy_dataset(&cfg.layout, 8, 2024, mode, cfg.image_size)?;
        let c = generate_toy_dataset(&cfg.layout, 8, 2025, mode, cfg.image_size)?;
        let path = dir.path().join(format!("{mode:?}"));
        save_dataset(&a, &path)?;
        let (reloaded, _) = load_dataset(&path)?;
        stable &= a.checksum() == b.checksum()
            && a.checksum() != c.checksum()
            && reloaded.checksum() == a.checksum();
    }
    let golden =
        generate_toy_dataset(&cfg.layout, 8, 2024, PairingMode::Paired, cfg.image_size)?.checksum();
    parts.push((
        stable && golden == GOLDEN_CHECKSUM,
        format!("dataset checksums repeat, survive a save and load, and match the pinned value ({golden})"),
    ));
    Ok(Outcome::all(parts))
}

fn brute_force(qx: &[f32], qy: &[f32], xs: &[Vec<f32>], ys: &[Vec<f32>]) -> (usize, f64) {
    let dist = |a: &[f32], b: &[f32]| {
        a.iter()
            .zip(b)
            .map(|(p, q)| (*p as f64 - *q as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let scores: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| dist(qx, x) + dist(qy, y))
        .collect();
    let best = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let index = scores.iter().position(|&s| s == best).expect("non-empty");
    (index, best)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn planted_vectors(rng: &mut ChaCha8Rng) -> (bool, String) {
    let (trials, dim) = (300, 6);
    let mut agree = 0;
    for t in 0..trials {
        let mut xs: Vec<Vec<f32>> = (0..10).map(|_| random_vec(rng, dim)).collect();
        let mut ys: Vec<Vec<f32>> = (0..10).map(|_| random_vec(rng, dim)).collect();
        if t % 3 == 0 {
            // duplicates make ties, which go to the earlier index
            let (a, b) = (rng.random_range(0..10), rng.random_range(0..10));
            xs[b] = xs[a].clone();
            ys[b] = ys[a].clone();
        }
        let k = rng.random_range(0..10);
        let noise = if t % 2 == 0 { 0.0 } else { 0.05 };
        let qx: Vec<f32> = xs[k]
            .iter()
            .map(|v| v + noise * rng.random_range(-1.0f32..1.0))
            .collect();
        let qy: Vec<f32> = ys[k]
            .iter()
            .map(|v| v + noise * rng.random_range(-1.0f32..1.0))
            .collect();
        let (want, want_d) = brute_force(&qx, &qy, &xs, &ys);
        if let Some((got, got_d)) = nearest_index(&qx, &qy, &xs, &ys) {
            if got == want && (got_d - want_d).abs() <= 1e-9 * want_d.max(1.0) {
                agree += 1;
            }
        }
    }
    (
        agree == trials,
        format!("{agree}/{trials} planted vector sets agree with brute force"),
    )
}

fn planted_scenes(
    train: &DatasetBundle,
    queries: &DatasetBundle,
    ex: &dyn FeatureExtractor,
    what: &str,
) -> Check {
    let feats = |imgs: Vec<&Image>| {
        imgs.into_iter()
            .map(|i| ex.features(i))
            .collect::<codegan_core::Result<Vec<_>>>()
    };
    let xs = feats(train.x.iter().map(|r| &r.image).collect())?;
    let ys = feats(train.y.iter().map(|r| &r.image).collect())?;
    let (mut exact, mut agree) = (0, 0);
    for i in 0..train.len() {
        let hit = nearest_neighbor(&train.x[i].image, &train.y[i].image, train, ex)?;
        if hit.distance == 0.0 && hit.composite.data() == train.c[i].image.data() {
            exact += 1;
        }
    }
    for q in 0..queries.len() {
        let (qx, qy) = (&queries.x[q].image, &queries.y[q].image);
        let hit = nearest_neighbor(qx, qy, train, ex)?;
        let (want, _) = brute_force(&ex.features(qx)?, &ex.features(qy)?, &xs, &ys);
        if hit.index == want && hit.composite.data() == train.c[want].image.data() {
            agree += 1;
        }
    }
    let (n, m) = (train.len(), queries.len());
    Ok(Outcome {
        pass: exact == n && agree == m,
        detail: format!("{what}: {exact}/{n} exact queries at distance 0, {agree}/{m} held-out queries match brute force"),
    })
}

pub fn nearest_neighbour(shared: &mut Shared) -> Check {
    let cfg = Config::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut parts = vec![planted_vectors(&mut rng)];

    let train = generate_toy_dataset(&cfg.layout, 10, 6, PairingMode::Paired, cfg.image_size)?;
    let queries = generate_toy_dataset(&cfg.layout, 10, 7, PairingMode::Paired, cfg.image_size)?;
    let fresh;
    let model: &CoDeModel = match &shared.paired {
        Some(run) => &run.pipeline.code,
        None => {
            fresh = CoDeModel::new(&mut rng, cfg.gen_filters, cfg.gen_depth, cfg.disc_filters);
            &fresh
        }
    };
    for (ex, what) in [
        (&PixelFeatures as &dyn FeatureExtractor, "pixels"),
        (&EncoderFeatures(model), "encoder"),
    ] {
        let o = planted_scenes(&train, &queries, ex, what)?;
        parts.push((o.pass, o.detail));
    }
    Ok(Outcome::all(parts))
}
