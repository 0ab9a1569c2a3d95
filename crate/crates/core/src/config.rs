//! Run configuration: a strict TOML file where every key has a default and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ToyLayoutRule;
use crate::error::{Error, Result};

/// What the decomposition L1 term compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecTarget {
    /// The transformed inputs fed to the composition network.
    Inputs,
    /// The ground-truth placed objects.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub image_size: usize,
    pub background_value: f32,
    pub batch_size: usize,

    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub lambda1: f32,
    pub lambda2: f32,
    pub lambda3: f32,
    pub gp_weight: f32,
    pub dec_target: DecTarget,

    pub gen_filters: usize,
    pub gen_depth: usize,
    pub disc_filters: usize,

    pub stn_channels: Vec<usize>,
    pub stn_hidden: usize,
    pub stn_lr: f32,
    pub stn_pretrain_steps: usize,

    pub use_rafn: bool,
    pub rafn_widths: Vec<usize>,
    pub rafn_mask_weight: f32,
    pub rafn_lr: f32,
    pub rafn_steps: usize,
    pub rafn_batch_size: usize,

    pub inpaint_lambda: f32,
    pub inpaint_steps: usize,
    pub inpaint_batch_size: usize,
    pub occluder_shift: f32,

    pub epochs: usize,
    /// Caps the number of CoDe steps when non-zero.
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub sample_every: usize,
    pub real_cache_size: usize,

    pub esmr_lambda: f32,
    pub esmr_steps: usize,
    pub esmr_lr: f32,
    pub esmr_update_d: bool,

    pub augment_flip: bool,
    pub layout: ToyLayoutRule,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            background_value: -1.0,
            batch_size: 16,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda1: 100.0,
            lambda2: 50.0,
            lambda3: 1.0,
            gp_weight: 10.0,
            dec_target: DecTarget::Inputs,
            gen_filters: 16,
            gen_depth: 5,
            disc_filters: 16,
            stn_channels: vec![8, 16, 16],
            stn_hidden: 32,
            stn_lr: 1e-3,
            stn_pretrain_steps: 0,
            use_rafn: false,
            rafn_widths: vec![16, 32, 64, 64],
            rafn_mask_weight: 0.1,
            rafn_lr: 1e-3,
            rafn_steps: 1000,
            rafn_batch_size: 8,
            inpaint_lambda: 0.01,
            inpaint_steps: 500,
            inpaint_batch_size: 8,
            occluder_shift: 0.25,
            epochs: 20,
            max_steps: 0,
            checkpoint_every: 200,
            sample_every: 100,
            real_cache_size: 32,
            esmr_lambda: 100.0,
            esmr_steps: 100,
            esmr_lr: 3e-4,
            esmr_update_d: false,
            augment_flip: false,
            layout: ToyLayoutRule::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every key, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size < 8 || !self.image_size.is_power_of_two() {
            return fail(format!(
                "image_size {} must be a power of two >= 8",
                self.image_size
            ));
        }
        if self.image_size >> self.gen_depth == 0 {
            return fail(format!(
                "gen_depth {} too deep for image_size {}",
                self.gen_depth, self.image_size
            ));
        }
        if self.image_size >> self.stn_channels.len() == 0 || self.stn_channels.is_empty() {
            return fail("stn_channels must be non-empty and fit the image size".into());
        }
        if self.rafn_widths.is_empty() || self.image_size >> self.rafn_widths.len() == 0 {
            return fail("rafn_widths must be non-empty and fit the image size".into());
        }
        if self.batch_size == 0
            || self.rafn_batch_size == 0
            || self.inpaint_batch_size == 0
            || self.gen_filters == 0
            || self.disc_filters == 0
            || self.stn_hidden == 0
        {
            return fail("batch_size and network widths must be positive".into());
        }
        if !(-1.0..=1.0).contains(&self.background_value) {
            return fail("background_value must lie in [-1, 1]".into());
        }
        let weights = [
            self.lr,
            self.stn_lr,
            self.rafn_lr,
            self.esmr_lr,
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.gp_weight,
            self.rafn_mask_weight,
            self.inpaint_lambda,
            self.esmr_lambda,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return fail("learning rates and loss weights must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        self.layout.validate()
    }
}
