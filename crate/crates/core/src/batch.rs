//! Mini-batch assembly and deterministic epoch ordering.

use codegan_autograd::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{stack, BinaryMask, Image};
use crate::scene::SceneExample;

/// Stacked scene tensors, all `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub mask_x: Tensor,
    pub mask_y: Tensor,
    pub c: Tensor,
    /// Flattened `[N, H, W]` labels.
    pub labels: Vec<u8>,
    pub x_c: Tensor,
    pub y_c: Tensor,
}

fn stack_masks(masks: &[&BinaryMask]) -> Result<Tensor> {
    let tensors: Vec<Tensor> = masks.iter().map(|m| m.to_tensor()).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    if refs.iter().any(|t| t.shape() != refs[0].shape()) {
        return Err(Error::Shape("stacked masks differ in size".into()));
    }
    Ok(Tensor::concat(&refs, 0))
}

impl Batch {
    /// Requires every scene to be complete (paired or converted).
    pub fn from_scenes(scenes: &[&SceneExample]) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let need = |o: &Option<Image>, what: &str| -> Result<Image> {
            o.clone()
                .ok_or_else(|| Error::Invalid(format!("batch scene is missing {what}")))
        };
        let mut c = Vec::new();
        let mut x_c = Vec::new();
        let mut y_c = Vec::new();
        let mut labels = Vec::new();
        for s in scenes {
            c.push(need(&s.c, "its composite")?);
            x_c.push(need(&s.x_c, "the first target")?);
            y_c.push(need(&s.y_c, "the second target")?);
            let l = s
                .c_labels
                .as_ref()
                .ok_or_else(|| Error::Invalid("batch scene is missing its labels".into()))?;
            labels.extend_from_slice(l.data());
        }
        fn refs(v: &[Image]) -> Vec<&Image> {
            v.iter().collect()
        }
        Ok(Self {
            x: stack(&scenes.iter().map(|s| &s.x).collect::<Vec<_>>())?,
            y: stack(&scenes.iter().map(|s| &s.y).collect::<Vec<_>>())?,
            mask_x: stack_masks(&scenes.iter().map(|s| &s.mask_x).collect::<Vec<_>>())?,
            mask_y: stack_masks(&scenes.iter().map(|s| &s.mask_y).collect::<Vec<_>>())?,
            c: stack(&refs(&c))?,
            labels,
            x_c: stack(&refs(&x_c))?,
            y_c: stack(&refs(&y_c))?,
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn var(t: &Tensor) -> Var {
        Var::constant(t.clone())
    }
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    order.shuffle(&mut rng);
    order
}

/// Consecutive chunks of an epoch order, dropping a short remainder unless it
/// is the only chunk.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let full: Vec<Vec<usize>> = order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    if full.is_empty() && !order.is_empty() {
        vec![order.to_vec()]
    } else {
        full
    }
}
