//! Raster domain types and the deterministic image/mask utilities shared by
//! every stage of the pipeline.
//!
//! Images hold values in `[-1, 1]` and are stored planar (channel-major), so a
//! batch of images maps directly onto an `[N, C, H, W]` tensor.

use codegan_autograd::Tensor;

use crate::error::{Error, Result};
use crate::warp::{affine_grid, bilinear_sample, AffineParams};

/// Pixel value used wherever no object is present (black).
pub const DEFAULT_BACKGROUND: f32 = -1.0;

/// Mask binarization threshold applied after any resampling.
pub const MASK_THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value.clamp(-1.0, 1.0); height * width * channels],
        }
    }

    /// Builds an image from `f(y, x, c)`; values are clamped into range.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, c).clamp(-1.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Planar `[C, H, W]` values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// `[1, C, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, self.channels, self.height, self.width],
            self.data.clone(),
        )
    }

    /// Extracts item `index` of an `[N, C, H, W]` tensor, clamping into `[-1, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || index >= s[0] {
            return Err(Error::Shape(format!(
                "cannot take image {index} from tensor {s:?}"
            )));
        }
        let plane = s[1] * s[2] * s[3];
        let slice = &t.data()[index * plane..(index + 1) * plane];
        if slice.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        Ok(Self {
            height: s[2],
            width: s[3],
            channels: s[1],
            data: slice.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        })
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f32 {
        assert_eq!(self.data.len(), other.data.len(), "image sizes differ");
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        (s / self.data.len().max(1) as f64) as f32
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn flip_horizontal(&self) -> Image {
        let w = self.width;
        Image::from_fn(self.height, w, self.channels, |y, x, c| {
            self.get(y, w - 1 - x, c)
        })
    }

    /// Copies `src` wherever `mask` is set and `fill` elsewhere.
    pub fn masked(&self, mask: &BinaryMask, fill: f32) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| {
            if mask.get(y, x) {
                self.get(y, x, c)
            } else {
                fill
            }
        })
    }
}

/// Stacks same-sized images into `[N, C, H, W]`.
pub fn stack(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("cannot stack zero images".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::Shape("stacked images differ in size".into()));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::new(&[images.len(), c, h, w], data))
}

pub fn unstack(t: &Tensor) -> Result<Vec<Image>> {
    (0..t.shape().first().copied().unwrap_or(0))
        .map(|i| Image::from_tensor(t, i))
        .collect()
}

/// Per-pixel foreground indicator.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} got {} values",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Invalid(format!("mask value {v} is not binary")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Thresholds a single-channel soft map at [`MASK_THRESHOLD`].
    pub fn from_soft(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape("soft mask size".into()));
        }
        Ok(Self {
            height,
            width,
            data: values
                .iter()
                .map(|&v| (v >= MASK_THRESHOLD) as u8)
                .collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// `[1, 1, H, W]` of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn to_image(&self) -> Image {
        Image::from_fn(self.height, self.width, 1, |y, x, _| {
            if self.get(y, x) {
                1.0
            } else {
                -1.0
            }
        })
    }

    /// Inclusive bounding box `(y_min, x_min, y_max, x_max)` of the foreground.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    b = Some(match b {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        b
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a & b)
            .collect();
        BinaryMask {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn or(&self, other: &BinaryMask) -> BinaryMask {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a | b)
            .collect();
        BinaryMask {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }

    /// Intersection over union; 1 when both are empty.
    pub fn iou(&self, other: &BinaryMask) -> f32 {
        let inter = self.and(other).count();
        let union = self.or(other).count();
        if union == 0 {
            1.0
        } else {
            inter as f32 / union as f32
        }
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        let w = self.width;
        BinaryMask::from_fn(self.height, w, |y, x| self.get(y, w - 1 - x))
    }

    /// Pixels of `img` differing from `background` by more than half a level
    /// in any channel.
    pub fn foreground_of(img: &Image, background: f32) -> BinaryMask {
        BinaryMask::from_fn(img.height(), img.width(), |y, x| {
            (0..img.channels()).any(|c| (img.get(y, x, c) - background).abs() > 0.5)
        })
    }

    /// Moves the mask by whole pixels; pixels shifted in from outside are unset.
    pub fn translated(&self, dy: i64, dx: i64) -> BinaryMask {
        let (h, w) = (self.height as i64, self.width as i64);
        BinaryMask::from_fn(self.height, self.width, |y, x| {
            let (sy, sx) = (y as i64 - dy, x as i64 - dx);
            (0..h).contains(&sy) && (0..w).contains(&sx) && self.get(sy as usize, sx as usize)
        })
    }

    /// The bounding box grown by `margin` pixels on every side, clipped to the
    /// frame. Empty masks give an empty box.
    pub fn bbox_mask(&self, margin: usize) -> BinaryMask {
        match self.bbox() {
            None => BinaryMask::zeros(self.height, self.width),
            Some((y0, x0, y1, x1)) => BinaryMask::from_fn(self.height, self.width, |y, x| {
                y + margin >= y0 && y <= y1 + margin && x + margin >= x0 && x <= x1 + margin
            }),
        }
    }
}

/// Label id of each composite pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    First = 1,
    Second = 2,
}

pub const NUM_LABELS: usize = 3;

/// Per-pixel object identity: 0 background, 1 first object, 2 second object.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegLabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SegLabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} got {} values",
                data.len()
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| v as usize >= NUM_LABELS) {
            return Err(Error::InvalidLabel(v));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Paints `first` then `second` (or the reverse when `second_in_front` is false),
    /// so the front object wins overlaps.
    pub fn from_layers(first: &BinaryMask, second: &BinaryMask, second_in_front: bool) -> Self {
        let data = first
            .data()
            .iter()
            .zip(second.data())
            .map(|(&a, &b)| match (a, b, second_in_front) {
                (_, 1, true) => 2,
                (1, _, true) => 1,
                (1, _, false) => 1,
                (_, 1, false) => 2,
                _ => 0,
            })
            .collect();
        Self {
            height: first.height(),
            width: first.width(),
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn mask_of(&self, label: u8) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v == label) as u8).collect(),
        }
    }

    pub fn class_counts(&self) -> [usize; NUM_LABELS] {
        let mut counts = [0; NUM_LABELS];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }

    pub fn contains(&self, label: u8) -> bool {
        self.data.contains(&label)
    }

    pub fn flip_horizontal(&self) -> SegLabelMap {
        let w = self.width;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..w {
                data.push(self.get(y, w - 1 - x));
            }
        }
        SegLabelMap {
            height: self.height,
            width: w,
            data,
        }
    }
}

/// `(mask_x, mask_y)` = pixels labelled 1 and 2. Disjoint by construction.
pub fn labels_to_masks(labels: &SegLabelMap) -> (BinaryMask, BinaryMask) {
    (
        labels.mask_of(Label::First as u8),
        labels.mask_of(Label::Second as u8),
    )
}

/// `m_x * x_t + m_y * y_t`, with `background` where neither mask is set.
pub fn assemble_composite(
    x_t: &Image,
    y_t: &Image,
    m_x: &BinaryMask,
    m_y: &BinaryMask,
    background: f32,
) -> Result<Image> {
    let dims = x_t.dims();
    if y_t.dims() != dims
        || m_x.dims() != dims
        || m_y.dims() != dims
        || x_t.channels != y_t.channels
    {
        return Err(Error::Shape(format!(
            "assemble_composite: x {:?}, y {:?}, m_x {:?}, m_y {:?}",
            dims,
            y_t.dims(),
            m_x.dims(),
            m_y.dims()
        )));
    }
    Ok(Image::from_fn(dims.0, dims.1, x_t.channels, |y, x, c| {
        let (a, b) = (m_x.get(y, x), m_y.get(y, x));
        if !a && !b {
            background
        } else {
            let va = if a { x_t.get(y, x, c) } else { 0.0 };
            let vb = if b { y_t.get(y, x, c) } else { 0.0 };
            va + vb
        }
    }))
}

/// Affine that maps the mask's bounding box onto a centered box whose longer
/// side is `target_fill` of the image side. `None` when the box is already
/// within one pixel of that placement.
pub fn centering_transform(mask: &BinaryMask, target_fill: f32) -> Result<Option<AffineParams>> {
    let (y0, x0, y1, x1) = mask.bbox().ok_or(Error::EmptyMask)?;
    if !(target_fill > 0.0 && target_fill.is_finite()) {
        return Err(Error::Invalid(format!(
            "target_fill {target_fill} must be positive"
        )));
    }
    let (h, w) = mask.dims();
    let side = h.min(w) as f32;
    let longer = ((y1 - y0).max(x1 - x0) + 1) as f32;
    let target = target_fill * side;
    let (cy, cx) = ((y0 + y1) as f32 / 2.0, (x0 + x1) as f32 / 2.0);
    let (icy, icx) = ((h - 1) as f32 / 2.0, (w - 1) as f32 / 2.0);
    if (longer - target).abs() <= 1.0 && (cy - icy).abs() <= 1.0 && (cx - icx).abs() <= 1.0 {
        return Ok(None);
    }
    let s = target / longer;
    Ok(Some(AffineParams::new([
        [1.0 / s, 0.0, 2.0 * cx / (w - 1) as f32 - 1.0],
        [0.0, 1.0 / s, 2.0 * cy / (h - 1) as f32 - 1.0],
    ])?))
}

/// Recenters and rescales an object so its mask's bounding box is centered with
/// its longer side equal to `target_fill` of the image side. Objects already
/// within one pixel of that placement are returned unchanged.
pub fn center_and_scale(
    img: &Image,
    mask: &BinaryMask,
    target_fill: f32,
    background: f32,
) -> Result<(Image, BinaryMask)> {
    if img.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "image {:?} vs mask {:?}",
            img.dims(),
            mask.dims()
        )));
    }
    let Some(theta) = centering_transform(mask, target_fill)? else {
        return Ok((img.clone(), mask.clone()));
    };
    let (h, w) = img.dims();
    let grid = affine_grid(&theta, h, w)?;
    let out = bilinear_sample(img, &grid, background)?;
    let soft = bilinear_sample(&mask.to_image().map01(), &grid, 0.0)?;
    let out_mask = BinaryMask::from_soft(h, w, soft.data())?;
    Ok((out, out_mask))
}

impl Image {
    /// Maps a single-channel `{-1, 1}` mask image to `{0, 1}`.
    fn map01(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| (v + 1.0) / 2.0).collect(),
            ..self.clone()
        }
    }
}
