//! Checkpoint files: named f32 tensors in safetensors format, with the config
//! echo, step count and a weight digest in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use codegan_autograd::{Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::code::{CoDeTrainer, Pipeline};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::{stack, unstack};
use crate::inpaint::InpaintModel;
use crate::rafn::RAFNModel;
use crate::train::CodeRun;

/// SHA-256 over every parameter and buffer: names, shapes and little-endian values.
pub fn weights_hash(module: &dyn Module) -> String {
    let mut h = Sha256::new();
    module.for_each_param("", &mut |name, p| {
        let t = p.value();
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

fn group_hash(groups: &[(&str, &dyn Module)]) -> String {
    let mut h = Sha256::new();
    for (name, m) in groups {
        h.update(name.as_bytes());
        h.update(weights_hash(*m).as_bytes());
    }
    hex::encode(h.finalize())
}

/// Header metadata of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    /// What the weights belong to, e.g. `code` or `inpaint-x`.
    pub kind: String,
    pub step: u64,
    pub config: Config,
    pub weights_sha256: String,
}

/// Writes the named modules plus any extra tensors (optimizer state, caches).
pub fn save(
    path: &Path,
    kind: &str,
    step: u64,
    config: &Config,
    groups: &[(&str, &dyn Module)],
    extra: Vec<(String, Tensor)>,
) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (prefix, m) in groups {
        m.for_each_param(prefix, &mut |name, p| {
            tensors.insert(name.to_string(), p.value());
        });
    }
    for (name, t) in extra {
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
    }
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(k, t)| {
            (
                k.clone(),
                t.shape().to_vec(),
                t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            )
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(k, shape, b)| TensorView::new(Dtype::F32, shape.clone(), b).map(|v| (k.clone(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta: HashMap<String, String> = [
        ("kind".to_string(), kind.to_string()),
        ("step".to_string(), step.to_string()),
        ("config".to_string(), config.to_toml()),
        ("weights_sha256".to_string(), group_hash(groups)),
    ]
    .into_iter()
    .collect();
    let data =
        safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}

/// A checkpoint read back into memory.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| bad(format!("metadata has no {k}")))
    };
    let meta = CheckpointMeta {
        kind: field("kind")?,
        step: field("step")?
            .parse()
            .map_err(|_| bad("step is not an integer".into()))?,
        config: Config::from_toml(&field("config")?)?,
        weights_sha256: field("weights_sha256")?,
    };
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(bad(format!(
                "tensor {name} is {:?}, expected F32",
                view.dtype()
            )));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::new(view.shape(), data));
    }
    Ok(Loaded { meta, tensors })
}

impl Loaded {
    /// Copies stored values into `module`. Every parameter must be present
    /// with a matching shape; nothing is written unless all are.
    pub fn restore(&self, prefix: &str, module: &dyn Module) -> Result<()> {
        let mut problems = Vec::new();
        module.for_each_param(prefix, &mut |name, p| match self.tensors.get(name) {
            None => problems.push(format!("missing tensor {name}")),
            Some(t) if t.shape() != p.shape().as_slice() => problems.push(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                p.shape()
            )),
            Some(_) => {}
        });
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        module.for_each_param(prefix, &mut |name, p| p.set(self.tensors[name].clone()));
        Ok(())
    }

    /// Restores all groups and checks the result against the stored digest.
    pub fn restore_all(&self, groups: &[(&str, &dyn Module)]) -> Result<()> {
        for (prefix, m) in groups {
            self.restore(prefix, *m)?;
        }
        let hash = group_hash(groups);
        if hash != self.meta.weights_sha256 {
            return Err(Error::Checkpoint(format!(
                "weight digest {hash} does not match {}",
                self.meta.weights_sha256
            )));
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix.`, keyed by full name.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let head = format!("{prefix}.");
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(&head))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.meta.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.meta.kind
            )))
        }
    }
}

/// Checkpoint kind written for a CoDe run.
pub const KIND_CODE: &str = "code";
/// Checkpoint kind written for the view network.
pub const KIND_RAFN: &str = "rafn";

/// Checkpoint kind of the inpainting network for one object domain.
pub fn inpaint_kind(domain: &str) -> String {
    format!("inpaint-{domain}")
}

/// Builds modules with the right shapes; every value is overwritten on restore.
fn template_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Saves the pipeline, optimizer states and the real-composite cache.
pub fn save_code(path: &Path, config: &Config, run: &CodeRun) -> Result<()> {
    let mut extra = Vec::new();
    extra.extend(run.trainer.opt_g.state("opt.g"));
    extra.extend(run.trainer.opt_stn.state("opt.stn"));
    extra.extend(run.trainer.opt_d.state("opt.d"));
    if !run.real_cache.is_empty() {
        extra.push((
            "real_cache".to_string(),
            stack(&run.real_cache.iter().collect::<Vec<_>>())?,
        ));
    }
    save(
        path,
        KIND_CODE,
        run.trainer.steps,
        config,
        &[("model", &run.pipeline)],
        extra,
    )
}

/// A CoDe run restored from disk.
pub struct CodeCheckpoint {
    pub config: Config,
    pub run: CodeRun,
}

pub fn load_code(path: &Path) -> Result<CodeCheckpoint> {
    let loaded = load(path)?;
    loaded.expect_kind(KIND_CODE)?;
    let config = loaded.meta.config.clone();
    let pipeline = Pipeline::new(&mut template_rng(), &config);
    loaded.restore_all(&[("model", &pipeline)])?;
    let mut trainer = CoDeTrainer::new(&config);
    trainer
        .opt_g
        .load_state("opt.g", &loaded.with_prefix("opt.g"));
    trainer
        .opt_stn
        .load_state("opt.stn", &loaded.with_prefix("opt.stn"));
    trainer
        .opt_d
        .load_state("opt.d", &loaded.with_prefix("opt.d"));
    trainer.steps = loaded.meta.step;
    let real_cache = match loaded.tensors.get("real_cache") {
        Some(t) => unstack(t)?,
        None => Vec::new(),
    };
    Ok(CodeCheckpoint {
        config,
        run: CodeRun {
            pipeline,
            trainer,
            real_cache,
        },
    })
}

pub fn save_inpaint(
    path: &Path,
    domain: &str,
    config: &Config,
    step: u64,
    model: &InpaintModel,
) -> Result<()> {
    save(
        path,
        &inpaint_kind(domain),
        step,
        config,
        &[("model", model)],
        Vec::new(),
    )
}

pub fn load_inpaint(path: &Path, domain: &str) -> Result<(Config, InpaintModel)> {
    let loaded = load(path)?;
    loaded.expect_kind(&inpaint_kind(domain))?;
    let c = loaded.meta.config.clone();
    let model = InpaintModel::new(
        &mut template_rng(),
        c.gen_filters,
        c.gen_depth,
        c.disc_filters,
    );
    loaded.restore_all(&[("model", &model)])?;
    Ok((c, model))
}

pub fn save_rafn(path: &Path, config: &Config, step: u64, model: &RAFNModel) -> Result<()> {
    save(
        path,
        KIND_RAFN,
        step,
        config,
        &[("model", model)],
        Vec::new(),
    )
}

pub fn load_rafn(path: &Path) -> Result<(Config, RAFNModel)> {
    let loaded = load(path)?;
    loaded.expect_kind(KIND_RAFN)?;
    let c = loaded.meta.config.clone();
    let model = RAFNModel::new(&mut template_rng(), &c.rafn_widths);
    loaded.restore_all(&[("model", &model)])?;
    Ok((c, model))
}
