//! Nearest-neighbour composite retrieval, used to check that a trained model
//! does more than recall training examples.

use codegan_autograd::{no_grad, Ctx, Var};

use crate::code::CoDeModel;
use crate::data::{DatasetBundle, PairingMode};
use crate::error::{Error, Result};
use crate::image::{stack, Image};

/// A fixed map from an object image to a feature vector.
pub trait FeatureExtractor {
    fn features(&self, img: &Image) -> Result<Vec<f32>>;
}

/// Raw pixel values.
pub struct PixelFeatures;

impl FeatureExtractor for PixelFeatures {
    fn features(&self, img: &Image) -> Result<Vec<f32>> {
        Ok(img.data().to_vec())
    }
}

/// Spatially averaged activations of every level of the shared
/// decomposition encoder, concatenated.
pub struct EncoderFeatures<'a>(pub &'a CoDeModel);

impl FeatureExtractor for EncoderFeatures<'_> {
    fn features(&self, img: &Image) -> Result<Vec<f32>> {
        let x = Var::constant(stack(&[img])?);
        let feats = no_grad(|| self.0.g_dec_encoder.forward(&x, &Ctx::eval()));
        Ok(feats
            .iter()
            .flat_map(|f| f.mean_axes(&[2, 3]).value().data().to_vec())
            .collect())
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Index minimizing `|qx - xs[i]| + |qy - ys[i]|`; ties go to the lowest index.
pub fn nearest_index(
    qx: &[f32],
    qy: &[f32],
    xs: &[Vec<f32>],
    ys: &[Vec<f32>],
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (fx, fy)) in xs.iter().zip(ys).enumerate() {
        let d = euclidean(qx, fx) + euclidean(qy, fy);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best
}

/// Features of the constituent objects of every training composite.
pub struct NeighborIndex {
    pub x: Vec<Vec<f32>>,
    pub y: Vec<Vec<f32>>,
}

impl NeighborIndex {
    pub fn build(train: &DatasetBundle, extractor: &dyn FeatureExtractor) -> Result<Self> {
        if train.mode != PairingMode::Paired {
            return Err(Error::Invalid(
                "nearest-neighbour search needs a paired training set".into(),
            ));
        }
        if train.c.is_empty() {
            return Err(Error::Invalid(
                "nearest-neighbour search over an empty training set".into(),
            ));
        }
        let x = train
            .x
            .iter()
            .map(|r| extractor.features(&r.image))
            .collect::<Result<_>>()?;
        let y = train
            .y
            .iter()
            .map(|r| extractor.features(&r.image))
            .collect::<Result<_>>()?;
        Ok(Self { x, y })
    }

    pub fn query(
        &self,
        x: &Image,
        y: &Image,
        extractor: &dyn FeatureExtractor,
    ) -> Result<(usize, f64)> {
        let (qx, qy) = (extractor.features(x)?, extractor.features(y)?);
        nearest_index(&qx, &qy, &self.x, &self.y).ok_or_else(|| {
            Error::Invalid("nearest-neighbour search over an empty training set".into())
        })
    }
}

#[derive(Clone, Debug)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
    pub composite: Image,
}

/// The training composite whose objects are closest to `(x, y)` in feature space.
pub fn nearest_neighbor(
    x: &Image,
    y: &Image,
    train: &DatasetBundle,
    extractor: &dyn FeatureExtractor,
) -> Result<Neighbor> {
    let index = NeighborIndex::build(train, extractor)?;
    let (i, distance) = index.query(x, y, extractor)?;
    Ok(Neighbor {
        index: i,
        distance,
        composite: train.c[i].image.clone(),
    })
}
