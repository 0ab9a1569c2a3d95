//! Procedural toy scenes and dataset directories.
//!
//! Sprites are hard-edged shapes with a two-tone texture (the lower half of the
//! sprite frame is darker), so placement, occlusion and rotation are all
//! visible in the pixels. Colors are quantized to 8 bits, which makes PNG
//! round trips exact.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{
    assemble_composite, labels_to_masks, BinaryMask, Image, SegLabelMap, DEFAULT_BACKGROUND,
};
use crate::io::{load_image, load_labels, load_mask, quantize, save_image, save_labels, save_mask};
use crate::scene::SceneExample;

/// Minimum distance in pixels between a placed object and the frame edge.
pub const FRAME_MARGIN: usize = 2;
const MAX_LAYOUT_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteKind {
    Disk,
    Square,
    Triangle,
    Diamond,
    Pentagon,
    Arrow,
}

impl SpriteKind {
    pub const ALL: [SpriteKind; 6] = [
        Self::Disk,
        Self::Square,
        Self::Triangle,
        Self::Diamond,
        Self::Pentagon,
        Self::Arrow,
    ];

    /// Membership in the unrotated sprite frame, whose bounding box is
    /// `[-0.5, 0.5]` along the longer side.
    pub fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Self::Disk => u * u + v * v <= 0.25,
            Self::Square => u.abs() <= 0.5 && v.abs() <= 0.5,
            Self::Triangle => in_convex(&[(0.0, -0.5), (0.5, 0.5), (-0.5, 0.5)], u, v),
            Self::Diamond => in_convex(&[(0.0, -0.5), (0.5, 0.0), (0.0, 0.5), (-0.5, 0.0)], u, v),
            Self::Pentagon => in_convex(&pentagon(), u, v),
            Self::Arrow => {
                let shaft = u.abs() <= 0.15 && (-0.1..=0.5).contains(&v);
                shaft || in_convex(&[(0.0, -0.5), (0.5, -0.1), (-0.5, -0.1)], u, v)
            }
        }
    }

    /// Area of the shape relative to its unit bounding square.
    pub fn area_fraction(self) -> f64 {
        match self {
            Self::Disk => PI / 4.0,
            Self::Square => 1.0,
            Self::Triangle | Self::Diamond => 0.5,
            Self::Pentagon => polygon_area(&pentagon()),
            Self::Arrow => 0.3 * 0.6 + 0.5 * 1.0 * 0.4,
        }
    }
}

/// Regular pentagon, point up, scaled so its width is 1 and its box centered.
fn pentagon() -> [(f64, f64); 5] {
    let raw: Vec<(f64, f64)> = (0..5)
        .map(|k| {
            let a = (-90.0 + 72.0 * k as f64).to_radians();
            (a.cos(), a.sin())
        })
        .collect();
    let width = 2.0 * 72f64.to_radians().sin();
    let y_mid = (-1.0 + 36f64.to_radians().cos()) / 2.0;
    let mut out = [(0.0, 0.0); 5];
    for (o, (x, y)) in out.iter_mut().zip(raw) {
        *o = (x / width, (y - y_mid) / width);
    }
    out
}

/// Point-in-polygon for convex polygons given clockwise in image coordinates.
fn in_convex(vertices: &[(f64, f64)], u: f64, v: f64) -> bool {
    let n = vertices.len();
    (0..n).all(|i| {
        let (ax, ay) = vertices[i];
        let (bx, by) = vertices[(i + 1) % n];
        (bx - ax) * (v - ay) - (by - ay) * (u - ax) >= -1e-12
    })
}

fn polygon_area(vertices: &[(f64, f64)]) -> f64 {
    let n = vertices.len();
    (0..n)
        .map(|i| {
            let (ax, ay) = vertices[i];
            let (bx, by) = vertices[(i + 1) % n];
            ax * by - bx * ay
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// An in-plane rotation on the 10° grid, standing in for a viewing azimuth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i32", into = "i32")]
pub struct ViewpointSpec {
    azimuth: i32,
}

impl ViewpointSpec {
    pub const FRONT: ViewpointSpec = ViewpointSpec { azimuth: 0 };

    pub fn new(azimuth: i32) -> Result<Self> {
        if azimuth % 10 != 0 || !(-180..=180).contains(&azimuth) {
            return Err(Error::Invalid(format!(
                "azimuth {azimuth} is not a multiple of 10 in [-180, 180]"
            )));
        }
        Ok(Self { azimuth })
    }

    pub fn degrees(self) -> i32 {
        self.azimuth
    }

    pub fn radians(self) -> f64 {
        (self.azimuth as f64).to_radians()
    }

    /// Every admissible azimuth.
    pub fn all() -> impl Iterator<Item = ViewpointSpec> {
        (-18..=18).map(|k| ViewpointSpec { azimuth: k * 10 })
    }
}

impl TryFrom<i32> for ViewpointSpec {
    type Error = Error;
    fn try_from(v: i32) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ViewpointSpec> for i32 {
    fn from(v: ViewpointSpec) -> i32 {
        v.azimuth
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub kind: SpriteKind,
    pub azimuth: ViewpointSpec,
    /// Side of the sprite frame as a fraction of the image side.
    pub scale: OrderedScale,
    pub color_seed: u64,
}

/// A finite `f32` usable as a hash key.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrderedScale(pub f32);

impl Eq for OrderedScale {}

impl std::hash::Hash for OrderedScale {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state)
    }
}

impl SpriteSpec {
    pub fn new(kind: SpriteKind, azimuth: ViewpointSpec, scale: f32, color_seed: u64) -> Self {
        Self {
            kind,
            azimuth,
            scale: OrderedScale(scale),
            color_seed,
        }
    }

    /// Bright and dark tones of this sprite, quantized to 8 bits.
    pub fn palette(&self) -> ([f32; 3], [f32; 3]) {
        let hue = ChaCha8Rng::seed_from_u64(self.color_seed).random::<f64>();
        (hsv_to_signed(hue, 0.75, 1.0), hsv_to_signed(hue, 0.75, 0.6))
    }
}

fn hsv_to_signed(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| quantize((2.0 * c - 1.0) as f32))
}

/// Renders a sprite centered at pixel coordinates `(cx, cy)`.
pub fn render_sprite_at(
    spec: &SpriteSpec,
    size: usize,
    cx: f64,
    cy: f64,
    background: f32,
) -> (Image, BinaryMask) {
    let side = spec.scale.0 as f64 * size as f64;
    let (sin, cos) = spec.azimuth.radians().sin_cos();
    let (bright, dark) = spec.palette();
    let frame = |y: usize, x: usize| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        ((dx * cos + dy * sin) / side, (-dx * sin + dy * cos) / side)
    };
    let mask = BinaryMask::from_fn(size, size, |y, x| {
        let (u, v) = frame(y, x);
        spec.kind.contains(u, v)
    });
    let img = Image::from_fn(size, size, 3, |y, x, c| {
        if !mask.get(y, x) {
            return background;
        }
        let (_, v) = frame(y, x);
        if v > 0.0 {
            dark[c]
        } else {
            bright[c]
        }
    });
    (img, mask)
}

/// Renders a sprite centered in a `size × size` canvas.
pub fn render_sprite(
    kind: SpriteKind,
    azimuth: ViewpointSpec,
    scale: f32,
    color_seed: u64,
    size: usize,
) -> (Image, BinaryMask) {
    let mid = (size as f64 - 1.0) / 2.0;
    render_sprite_at(
        &SpriteSpec::new(kind, azimuth, scale, color_seed),
        size,
        mid,
        mid,
        DEFAULT_BACKGROUND,
    )
}

/// Relative placement of the second object (B) with respect to the first (A).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyLayoutRule {
    /// Center of A as fractions of the image `(x, y)`.
    pub a_center: [f32; 2],
    /// Sprite-frame side of A as a fraction of the image side.
    pub a_size: f32,
    /// Offset of B's center from A's, as fractions of the image.
    pub b_offset: [f32; 2],
    /// Size of B relative to A.
    pub scale_ratio: f32,
    pub b_in_front: bool,
    /// Uniform offset noise amplitude (fraction of the image).
    pub jitter_offset: f32,
    /// Uniform relative size noise amplitude.
    pub jitter_scale: f32,
    /// Size of the centered input objects.
    pub input_fill: f32,
    pub kinds_a: Vec<SpriteKind>,
    pub kinds_b: Vec<SpriteKind>,
    pub azimuths: Vec<i32>,
}

impl Default for ToyLayoutRule {
    fn default() -> Self {
        Self {
            a_center: [0.4, 0.42],
            a_size: 0.42,
            b_offset: [0.2, 0.16],
            scale_ratio: 0.8,
            b_in_front: true,
            jitter_offset: 0.0,
            jitter_scale: 0.0,
            input_fill: 0.5,
            kinds_a: vec![SpriteKind::Disk, SpriteKind::Square, SpriteKind::Pentagon],
            kinds_b: vec![SpriteKind::Triangle, SpriteKind::Diamond, SpriteKind::Arrow],
            azimuths: vec![0],
        }
    }
}

impl ToyLayoutRule {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.a_size, self.scale_ratio, self.input_fill];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(
                "layout sizes and scale_ratio must be positive".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.jitter_offset) || !(0.0..0.5).contains(&self.jitter_scale) {
            return Err(Error::Config("layout jitter must be in [0, 0.5)".into()));
        }
        if self.kinds_a.is_empty() || self.kinds_b.is_empty() || self.azimuths.is_empty() {
            return Err(Error::Config(
                "layout needs at least one kind per object and one azimuth".into(),
            ));
        }
        for &a in &self.azimuths {
            ViewpointSpec::new(a).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    Paired,
    Unpaired,
    /// Object sets without composites.
    UnpairedIncomplete,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRecord {
    pub image: Image,
    pub mask: BinaryMask,
    pub sprite: Option<SpriteSpec>,
}

impl ObjectRecord {
    fn flipped(&self) -> Self {
        Self {
            image: self.image.flip_horizontal(),
            mask: self.mask.flip_horizontal(),
            // every sprite kind is mirror-symmetric, so a mirror is a reversed rotation
            sprite: self.sprite.map(|s| SpriteSpec {
                azimuth: ViewpointSpec {
                    azimuth: -s.azimuth.azimuth,
                },
                ..s
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeRecord {
    pub image: Image,
    pub labels: SegLabelMap,
    /// Full objects as placed, before occlusion (known for toy data only).
    pub x_full: Option<ObjectRecord>,
    pub y_full: Option<ObjectRecord>,
}

impl CompositeRecord {
    fn flipped(&self) -> Self {
        Self {
            image: self.image.flip_horizontal(),
            labels: self.labels.flip_horizontal(),
            x_full: self.x_full.as_ref().map(ObjectRecord::flipped),
            y_full: self.y_full.as_ref().map(ObjectRecord::flipped),
        }
    }
}

/// The object sets X and Y and the composite set C.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub mode: PairingMode,
    pub size: usize,
    pub x: Vec<ObjectRecord>,
    pub y: Vec<ObjectRecord>,
    pub c: Vec<CompositeRecord>,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.c.len().max(self.x.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index-aligned scene; only meaningful in paired mode.
    pub fn scene(&self, i: usize) -> Result<SceneExample> {
        if self.mode != PairingMode::Paired {
            return Err(Error::Invalid(
                "scenes are only index-aligned in paired mode".into(),
            ));
        }
        let (x, y, c) = (&self.x[i], &self.y[i], &self.c[i]);
        let scene = SceneExample {
            x: x.image.clone(),
            y: y.image.clone(),
            mask_x: x.mask.clone(),
            mask_y: y.mask.clone(),
            c: Some(c.image.clone()),
            c_labels: Some(c.labels.clone()),
            x_c: c.x_full.as_ref().map(|o| o.image.clone()),
            y_c: c.y_full.as_ref().map(|o| o.image.clone()),
            paired: true,
        };
        scene.validate()?;
        Ok(scene)
    }

    /// SHA-256 over every pixel, mask and label, in set order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}:{}", self.mode, self.size));
        let obj = |h: &mut Sha256, o: &ObjectRecord| {
            for v in o.image.data() {
                h.update(v.to_le_bytes());
            }
            h.update(o.mask.data());
        };
        for o in self.x.iter().chain(&self.y) {
            obj(&mut h, o);
        }
        for c in &self.c {
            for v in c.image.data() {
                h.update(v.to_le_bytes());
            }
            h.update(c.labels.data());
            for o in c.x_full.iter().chain(&c.y_full) {
                obj(&mut h, o);
            }
        }
        hex::encode(h.finalize())
    }

    /// Every record mirrored horizontally.
    pub fn flipped(&self) -> Self {
        Self {
            mode: self.mode,
            size: self.size,
            x: self.x.iter().map(ObjectRecord::flipped).collect(),
            y: self.y.iter().map(ObjectRecord::flipped).collect(),
            c: self.c.iter().map(CompositeRecord::flipped).collect(),
        }
    }

    /// Keeps only the first `n` entries of every set.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            mode: self.mode,
            size: self.size,
            x: self.x.iter().take(n).cloned().collect(),
            y: self.y.iter().take(n).cloned().collect(),
            c: self.c.iter().take(n).cloned().collect(),
        }
    }
}

/// Appends a mirrored copy of every set, keeping paired indices aligned.
pub fn augment_flip(bundle: &DatasetBundle) -> DatasetBundle {
    let flipped = bundle.flipped();
    let mut out = bundle.clone();
    out.x.extend(flipped.x);
    out.y.extend(flipped.y);
    out.c.extend(flipped.c);
    out
}

struct Placed {
    a: SpriteSpec,
    b: SpriteSpec,
    a_obj: (Image, BinaryMask),
    b_obj: (Image, BinaryMask),
}

fn color_seed(rng: &mut ChaCha8Rng, parity: u64) -> u64 {
    (rng.random::<u64>() >> 1 << 1) | parity
}

fn fits(mask: &BinaryMask) -> bool {
    let size = mask.height();
    match mask.bbox() {
        Some((y0, x0, y1, x1)) => y0.min(x0) >= FRAME_MARGIN && y1.max(x1) + FRAME_MARGIN < size,
        None => false,
    }
}

fn place(rule: &ToyLayoutRule, size: usize, rng: &mut ChaCha8Rng, parity: u64) -> Result<Placed> {
    let kind_a = *rule.kinds_a.choose(rng).expect("validated non-empty");
    let kind_b = *rule.kinds_b.choose(rng).expect("validated non-empty");
    let az = ViewpointSpec::new(*rule.azimuths.choose(rng).expect("validated non-empty"))?;
    let (seed_a, seed_b) = (color_seed(rng, parity), color_seed(rng, parity));
    let jitter = |amp: f32, rng: &mut ChaCha8Rng| {
        if amp > 0.0 {
            rng.random_range(-amp..=amp)
        } else {
            0.0
        }
    };
    let s = size as f64;
    for _ in 0..MAX_LAYOUT_RETRIES {
        let ja = [
            jitter(rule.jitter_offset, rng),
            jitter(rule.jitter_offset, rng),
        ];
        let jb = [
            jitter(rule.jitter_offset, rng),
            jitter(rule.jitter_offset, rng),
        ];
        let js = jitter(rule.jitter_scale, rng);
        let size_a = rule.a_size * (1.0 + js);
        let a = SpriteSpec::new(kind_a, az, size_a, seed_a);
        let b = SpriteSpec::new(kind_b, az, size_a * rule.scale_ratio, seed_b);
        let ca = [
            (rule.a_center[0] + ja[0]) as f64 * s,
            (rule.a_center[1] + ja[1]) as f64 * s,
        ];
        let cb = [
            ca[0] + (rule.b_offset[0] + jb[0]) as f64 * s,
            ca[1] + (rule.b_offset[1] + jb[1]) as f64 * s,
        ];
        let a_obj = render_sprite_at(&a, size, ca[0], ca[1], DEFAULT_BACKGROUND);
        let b_obj = render_sprite_at(&b, size, cb[0], cb[1], DEFAULT_BACKGROUND);
        if fits(&a_obj.1) && fits(&b_obj.1) {
            return Ok(Placed { a, b, a_obj, b_obj });
        }
    }
    Err(Error::Invalid(format!(
        "layout leaves the frame after {MAX_LAYOUT_RETRIES} attempts"
    )))
}

fn composite(rule: &ToyLayoutRule, p: Placed) -> Result<CompositeRecord> {
    let labels = SegLabelMap::from_layers(&p.a_obj.1, &p.b_obj.1, rule.b_in_front);
    let (mx, my) = labels_to_masks(&labels);
    let image = assemble_composite(&p.a_obj.0, &p.b_obj.0, &mx, &my, DEFAULT_BACKGROUND)?;
    Ok(CompositeRecord {
        image,
        labels,
        x_full: Some(ObjectRecord {
            image: p.a_obj.0,
            mask: p.a_obj.1,
            sprite: Some(p.a),
        }),
        y_full: Some(ObjectRecord {
            image: p.b_obj.0,
            mask: p.b_obj.1,
            sprite: Some(p.b),
        }),
    })
}

fn centered(spec: SpriteSpec, size: usize) -> ObjectRecord {
    let (image, mask) = render_sprite(spec.kind, spec.azimuth, spec.scale.0, spec.color_seed, size);
    ObjectRecord {
        image,
        mask,
        sprite: Some(spec),
    }
}

/// Deterministic toy dataset of `n` scenes at `size × size`.
///
/// Paired: `X[i]`, `Y[i]` are the centered objects of composite `C[i]`.
/// Unpaired: `X`, `Y` and `C` come from independent streams with disjoint
/// color seeds (even for objects, odd for composites).
pub fn generate_toy_dataset(
    rule: &ToyLayoutRule,
    n: usize,
    seed: u64,
    mode: PairingMode,
    size: usize,
) -> Result<DatasetBundle> {
    rule.validate()?;
    if n == 0 {
        return Err(Error::Invalid("dataset size must be at least 1".into()));
    }
    let mut bundle = DatasetBundle {
        mode,
        size,
        x: Vec::new(),
        y: Vec::new(),
        c: Vec::new(),
    };
    match mode {
        PairingMode::Paired => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..n {
                let p = place(rule, size, &mut rng, 0)?;
                let fill = rule.input_fill;
                bundle.x.push(centered(
                    SpriteSpec {
                        scale: OrderedScale(fill),
                        ..p.a
                    },
                    size,
                ));
                bundle.y.push(centered(
                    SpriteSpec {
                        scale: OrderedScale(fill),
                        ..p.b
                    },
                    size,
                ));
                bundle.c.push(composite(rule, p)?);
            }
        }
        PairingMode::Unpaired | PairingMode::UnpairedIncomplete => {
            let mut objects = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..n {
                let p = place(rule, size, &mut objects, 0)?;
                let fill = OrderedScale(rule.input_fill);
                bundle
                    .x
                    .push(centered(SpriteSpec { scale: fill, ..p.a }, size));
                bundle
                    .y
                    .push(centered(SpriteSpec { scale: fill, ..p.b }, size));
            }
            if mode == PairingMode::Unpaired {
                let mut scenes = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
                for _ in 0..n {
                    let p = place(rule, size, &mut scenes, 1)?;
                    bundle.c.push(composite(rule, p)?);
                }
            }
        }
    }
    Ok(bundle)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    mode: PairingMode,
    height: usize,
    width: usize,
    counts: BTreeMap<String, usize>,
    #[serde(default)]
    sprites: BTreeMap<String, Vec<Option<SpriteSpec>>>,
}

const DIRS: [&str; 10] = [
    "X", "X_mask", "Y", "Y_mask", "C", "C_labels", "X_c", "X_c_mask", "Y_c", "Y_c_mask",
];

fn file(dir: &Path, sub: &str, i: usize) -> PathBuf {
    dir.join(sub).join(format!("{i:06}.png"))
}

pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    for sub in DIRS {
        let d = dir.join(sub);
        if d.exists() {
            std::fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    for (i, o) in bundle.x.iter().enumerate() {
        save_image(&file(dir, "X", i), &o.image)?;
        save_mask(&file(dir, "X_mask", i), &o.mask)?;
    }
    for (i, o) in bundle.y.iter().enumerate() {
        save_image(&file(dir, "Y", i), &o.image)?;
        save_mask(&file(dir, "Y_mask", i), &o.mask)?;
    }
    let mut sprites: BTreeMap<String, Vec<Option<SpriteSpec>>> = BTreeMap::new();
    sprites.insert("X".into(), bundle.x.iter().map(|o| o.sprite).collect());
    sprites.insert("Y".into(), bundle.y.iter().map(|o| o.sprite).collect());
    let with_full = bundle
        .c
        .iter()
        .all(|c| c.x_full.is_some() && c.y_full.is_some());
    for (i, c) in bundle.c.iter().enumerate() {
        save_image(&file(dir, "C", i), &c.image)?;
        save_labels(&file(dir, "C_labels", i), &c.labels)?;
        if let (true, Some(xf), Some(yf)) = (with_full, &c.x_full, &c.y_full) {
            save_image(&file(dir, "X_c", i), &xf.image)?;
            save_mask(&file(dir, "X_c_mask", i), &xf.mask)?;
            save_image(&file(dir, "Y_c", i), &yf.image)?;
            save_mask(&file(dir, "Y_c_mask", i), &yf.mask)?;
        }
    }
    if with_full && !bundle.c.is_empty() {
        sprites.insert(
            "X_c".into(),
            bundle
                .c
                .iter()
                .map(|c| c.x_full.as_ref().and_then(|o| o.sprite))
                .collect(),
        );
        sprites.insert(
            "Y_c".into(),
            bundle
                .c
                .iter()
                .map(|c| c.y_full.as_ref().and_then(|o| o.sprite))
                .collect(),
        );
    }
    let counts = [
        ("X", bundle.x.len()),
        ("Y", bundle.y.len()),
        ("C", bundle.c.len()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let manifest = Manifest {
        mode: bundle.mode,
        height: bundle.size,
        width: bundle.size,
        counts,
        sprites,
    };
    let path = dir.join("meta.json");
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::data(&path, e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn load_objects(
    dir: &Path,
    images: &str,
    masks: &str,
    sprites: Option<&Vec<Option<SpriteSpec>>>,
) -> Result<Vec<ObjectRecord>> {
    let image_files = png_files(&dir.join(images))?;
    let mask_files = png_files(&dir.join(masks))?;
    if image_files.len() != mask_files.len() {
        return Err(Error::data(
            dir.join(masks),
            format!(
                "{} images but {} masks",
                image_files.len(),
                mask_files.len()
            ),
        ));
    }
    image_files
        .iter()
        .zip(&mask_files)
        .enumerate()
        .map(|(i, (ip, mp))| {
            let image = load_image(ip)?;
            let mask = load_mask(mp)?;
            if image.dims() != mask.dims() {
                return Err(Error::data(mp, "mask size differs from its image"));
            }
            Ok(ObjectRecord {
                image,
                mask,
                sprite: sprites.and_then(|s| s.get(i).copied().flatten()),
            })
        })
        .collect()
}

/// What [`load_dataset`] found besides the data itself.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub warnings: Vec<String>,
}

/// Reads a dataset directory, validating shapes, ranges and labels. Any
/// malformed file fails the whole load.
pub fn load_dataset(dir: &Path) -> Result<(DatasetBundle, LoadReport)> {
    if !dir.is_dir() {
        return Err(Error::data(dir, "dataset directory does not exist"));
    }
    let mut report = LoadReport::default();
    let meta_path = dir.join("meta.json");
    let manifest: Option<Manifest> = if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::data(&meta_path, e.to_string()))?)
    } else {
        None
    };
    let sprites = manifest.as_ref().map(|m| &m.sprites);
    let x = load_objects(dir, "X", "X_mask", sprites.and_then(|s| s.get("X")))?;
    let y = load_objects(dir, "Y", "Y_mask", sprites.and_then(|s| s.get("Y")))?;
    let composites = png_files(&dir.join("C"))?;
    let mut mode = manifest.as_ref().map_or(PairingMode::Paired, |m| m.mode);
    let mut c = Vec::new();
    if composites.is_empty() {
        if mode != PairingMode::UnpairedIncomplete {
            report.warnings.push(format!(
                "no composites under {}; continuing without C",
                dir.join("C").display()
            ));
        }
        mode = PairingMode::UnpairedIncomplete;
    } else {
        let label_dir = dir.join("C_labels");
        if !label_dir.is_dir() {
            return Err(Error::data(
                label_dir,
                "composite label directory is missing",
            ));
        }
        let labels = png_files(&label_dir)?;
        if labels.len() != composites.len() {
            return Err(Error::data(
                label_dir,
                format!(
                    "{} composites but {} label maps",
                    composites.len(),
                    labels.len()
                ),
            ));
        }
        let full_x = load_objects(dir, "X_c", "X_c_mask", sprites.and_then(|s| s.get("X_c")))?;
        let full_y = load_objects(dir, "Y_c", "Y_c_mask", sprites.and_then(|s| s.get("Y_c")))?;
        let has_full = full_x.len() == composites.len() && full_y.len() == composites.len();
        let mut full_x = full_x.into_iter();
        let mut full_y = full_y.into_iter();
        for (cp, lp) in composites.iter().zip(&labels) {
            let image = load_image(cp)?;
            let labels = load_labels(lp)?;
            if image.dims() != labels.dims() {
                return Err(Error::data(lp, "label map size differs from its composite"));
            }
            let (xf, yf) = if has_full {
                (full_x.next(), full_y.next())
            } else {
                (None, None)
            };
            c.push(CompositeRecord {
                image,
                labels,
                x_full: xf,
                y_full: yf,
            });
        }
    }
    if x.is_empty() && y.is_empty() && c.is_empty() {
        return Err(Error::data(dir, "dataset holds no images"));
    }
    if mode == PairingMode::Paired && (x.len() != c.len() || y.len() != c.len()) {
        return Err(Error::data(
            dir,
            format!(
                "paired sets differ in size: {} / {} / {}",
                x.len(),
                y.len(),
                c.len()
            ),
        ));
    }
    let size = x
        .first()
        .map(|o| o.image.height())
        .or_else(|| manifest.as_ref().map(|m| m.height))
        .unwrap_or(0);
    let all_dims = x
        .iter()
        .chain(&y)
        .map(|o| o.image.dims())
        .chain(c.iter().map(|r| r.image.dims()))
        .all(|d| d == (size, size));
    if !all_dims {
        return Err(Error::data(
            dir,
            format!("images must all be {size}x{size}"),
        ));
    }
    Ok((
        DatasetBundle {
            mode,
            size,
            x,
            y,
            c,
        },
        report,
    ))
}

/// A novel-view training triple: the first object at a source view, the second
/// object's mask at the target view, and the first object at the target view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSample {
    pub x_r: Image,
    pub y_mask: BinaryMask,
    pub x_target: Image,
    pub x_target_mask: BinaryMask,
    pub source: ViewpointSpec,
    pub target: ViewpointSpec,
}

/// Toy viewpoint pairs: rotations stand in for azimuths. The second object
/// kind should be rotation-revealing (e.g. an arrow) so its mask encodes the
/// target view.
pub fn generate_view_samples(
    n: usize,
    seed: u64,
    size: usize,
    kinds_x: &[SpriteKind],
    kind_y: SpriteKind,
    source: Option<ViewpointSpec>,
    targets: &[ViewpointSpec],
) -> Result<Vec<ViewSample>> {
    if kinds_x.is_empty() || targets.is_empty() {
        return Err(Error::Invalid(
            "view samples need object kinds and target views".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views: Vec<ViewpointSpec> = ViewpointSpec::all().collect();
    (0..n)
        .map(|_| {
            let kind = *kinds_x.choose(&mut rng).expect("non-empty");
            let src = source.unwrap_or_else(|| *views.choose(&mut rng).expect("non-empty"));
            let tgt = *targets.choose(&mut rng).expect("non-empty");
            let color = color_seed(&mut rng, 0);
            let (x_r, _) = render_sprite(kind, src, 0.5, color, size);
            let (x_target, x_target_mask) = render_sprite(kind, tgt, 0.5, color, size);
            let (_, y_mask) = render_sprite(kind_y, tgt, 0.5, color ^ 1, size);
            Ok(ViewSample {
                x_r,
                y_mask,
                x_target,
                x_target_mask,
                source: src,
                target: tgt,
            })
        })
        .collect()
}
