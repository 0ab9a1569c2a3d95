use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use codegan_core::config::Config;
use codegan_core::metrics::{Metrics, MetricsLog};

use crate::ConfigArgs;

/// Loads the config, then applies `CODEGAN_SEED` and `--seed` in that order.
pub fn resolve_config(args: &ConfigArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Ok(raw) = std::env::var("CODEGAN_SEED") {
        cfg.seed = raw.trim().parse().map_err(|_| {
            codegan_core::Error::Config(format!("CODEGAN_SEED={raw:?} is not an unsigned integer"))
        })?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Output directory of one command: config echo, metrics log, checkpoints
/// and sample grids.
pub struct RunDir {
    pub root: PathBuf,
    pub metrics: MetricsLog,
}

impl RunDir {
    pub fn create(root: &Path, cfg: &Config) -> Result<Self> {
        for sub in ["checkpoints", "samples"] {
            std::fs::create_dir_all(root.join(sub))
                .with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        let echo = root.join("config.toml");
        std::fs::write(&echo, cfg.to_toml())
            .with_context(|| format!("writing {}", echo.display()))?;
        let metrics = MetricsLog::create(&root.join("metrics.log"))?;
        Ok(Self {
            root: root.to_path_buf(),
            metrics,
        })
    }

    pub fn log(&mut self, step: u64, m: &Metrics) -> codegan_core::Result<()> {
        self.metrics.write(step, m)
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("step_{step:06}.safetensors"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("final.safetensors")
    }

    pub fn sample(&self, step: u64) -> PathBuf {
        self.root
            .join("samples")
            .join(format!("step_{step:06}.png"))
    }
}

/// True when `step` (zero-based) completes a multiple of `every`.
pub fn due(step: u64, every: usize) -> bool {
    every > 0 && (step + 1).is_multiple_of(every as u64)
}
