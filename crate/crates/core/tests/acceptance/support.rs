use std::error::Error;

use codegan_core::code::{evaluate, EvalReport};
use codegan_core::config::Config;
use codegan_core::data::{generate_toy_dataset, PairingMode};
use codegan_core::scene::SceneExample;
use codegan_core::train::{train_code, CodeRun, Hooks};

pub type Check = Result<Outcome, Box<dyn Error>>;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn fail(detail: String) -> Self {
        Self {
            pass: false,
            detail,
        }
    }

    /// Passes when every part passes; failed parts are listed first.
    pub fn all(parts: Vec<(bool, String)>) -> Self {
        let pass = parts.iter().all(|(ok, _)| *ok);
        let mut ordered: Vec<String> = parts
            .iter()
            .filter(|(ok, _)| !ok)
            .map(|(_, d)| format!("FAILED {d}"))
            .collect();
        ordered.extend(parts.iter().filter(|(ok, _)| *ok).map(|(_, d)| d.clone()));
        Self {
            pass,
            detail: ordered.join("; "),
        }
    }
}

/// State handed from one criterion to the next.
#[derive(Default)]
pub struct Shared {
    /// The model trained by the paired run, reused by refinement and retrieval.
    pub paired: Option<CodeRun>,
}

pub const TRAIN_SCENES: usize = 500;
pub const HELD_OUT_SCENES: usize = 64;
pub const TRAIN_SEED: u64 = 1;
pub const HELD_OUT_SEED: u64 = 2;

pub fn paired_scenes(
    cfg: &Config,
    n: usize,
    seed: u64,
) -> Result<Vec<SceneExample>, Box<dyn Error>> {
    let bundle = generate_toy_dataset(&cfg.layout, n, seed, PairingMode::Paired, cfg.image_size)?;
    Ok((0..bundle.len())
        .map(|i| bundle.scene(i))
        .collect::<Result<_, _>>()?)
}

/// Held-out reports after every epoch of a CoDe run.
pub struct EpochEval<'a> {
    pub held_out: &'a [SceneExample],
    pub background: f32,
    pub batch_size: usize,
    pub reports: Vec<EvalReport>,
}

impl Hooks<CodeRun> for EpochEval<'_> {
    fn on_epoch(&mut self, _epoch: usize, run: &CodeRun) -> codegan_core::Result<()> {
        self.reports.push(evaluate(
            &run.pipeline,
            self.held_out,
            self.background,
            self.batch_size,
        )?);
        Ok(())
    }
}

/// Trains on `train` and scores the toy thresholds against the held-out set.
pub fn run_and_score(
    cfg: &Config,
    train: &[SceneExample],
    held_out: &[SceneExample],
    l1_ratio: f32,
    min_iou: f32,
    min_occlusion: f32,
) -> Result<(CodeRun, Outcome), Box<dyn Error>> {
    let mut hooks = EpochEval {
        held_out,
        background: cfg.background_value,
        batch_size: cfg.batch_size,
        reports: Vec::new(),
    };
    let run = train_code(cfg, train, None, &mut hooks)?;
    let (Some(first), Some(last)) = (hooks.reports.first(), hooks.reports.last()) else {
        return Ok((run, Outcome::fail("no epoch completed".into())));
    };
    let ratio = last.l1_composite / first.l1_composite;
    let outcome = Outcome::all(vec![
        (
            ratio <= l1_ratio,
            format!(
                "held-out L1 {:.4} -> {:.4} over {} epochs (ratio {ratio:.3}, limit {l1_ratio})",
                first.l1_composite,
                last.l1_composite,
                hooks.reports.len()
            ),
        ),
        (
            last.iou.iter().all(|&v| v >= min_iou),
            format!(
                "IoU bg/x/y {:.3}/{:.3}/{:.3} (min {min_iou})",
                last.iou[0], last.iou[1], last.iou[2]
            ),
        ),
        (
            last.occlusion_accuracy >= min_occlusion,
            format!(
                "occlusion accuracy {:.3} (min {min_occlusion})",
                last.occlusion_accuracy
            ),
        ),
    ]);
    Ok((run, outcome))
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (p, q)| m.max((p - q).abs()))
}

pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64
}

/// Mean of `-ln p[label]` over an `[N, K, H, W]` probability map.
pub fn mean_ce(probs: &[f64], shape: &[usize], labels: &[u8]) -> f64 {
    let (n, k, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..plane {
            let l = labels[b * plane + p] as usize;
            total -= probs[(b * k + l) * plane + p].max(1e-7).ln();
        }
    }
    total / (n * plane) as f64
}
