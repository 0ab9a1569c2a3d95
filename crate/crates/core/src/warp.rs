//! Differentiable geometric warping: affine sampling grids, bilinear sampling
//! and appearance-flow grids.
//!
//! Normalized coordinates follow the pixel-center convention: `-1` and `1` are
//! the centers of the first and last pixel, so pixel `j` of a width-`W` row sits
//! at `-1 + 2j / (W - 1)`. Grids store `(x, y)` pairs.

use std::sync::Arc;

use codegan_autograd::{no_grad, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::Image;

/// Fractional pixel offsets closer than this to an integer are snapped, so that
/// exact-lattice sampling reproduces source pixels without rounding drift.
const SNAP: f32 = 1e-4;

/// A 2×3 matrix mapping normalized output coordinates `(x, y, 1)` to source
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams(pub [[f32; 3]; 2]);

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn new(matrix: [[f32; 3]; 2]) -> Result<Self> {
        if matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine parameters"));
        }
        Ok(Self(matrix))
    }

    pub fn translation(tx: f32, ty: f32) -> Self {
        Self([[1.0, 0.0, tx], [0.0, 1.0, ty]])
    }

    pub fn from_slice(v: &[f32]) -> Result<Self> {
        if v.len() != 6 {
            return Err(Error::Shape(format!(
                "affine needs 6 values, got {}",
                v.len()
            )));
        }
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]]])
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.iter().flatten().copied().collect()
    }

    /// `[1, 2, 3]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 2, 3], self.to_vec())
    }

    /// The transform equivalent to sampling with `inner` the result of sampling
    /// with `self`: `p -> self(inner(p))`.
    pub fn then_sample(&self, inner: &AffineParams) -> AffineParams {
        let (a, b) = (&self.0, &inner.0);
        let mut m = [[0.0f32; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            m[r][2] += a[r][2];
        }
        AffineParams(m)
    }

    pub fn apply(&self, x: f32, y: f32) -> (f32, f32) {
        let m = &self.0;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }
}

/// Normalized source coordinates for every output pixel, `(x, y)` interleaved
/// in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    height: usize,
    width: usize,
    coords: Vec<f32>,
}

impl SampleGrid {
    pub fn new(height: usize, width: usize, coords: Vec<f32>) -> Result<Self> {
        if coords.len() != height * width * 2 {
            return Err(Error::Shape(format!(
                "grid {height}x{width} got {} values",
                coords.len()
            )));
        }
        Ok(Self {
            height,
            width,
            coords,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Self {
        let mut coords = Vec::with_capacity(height * width * 2);
        for i in 0..height {
            for j in 0..width {
                let (x, y) = f(i, j);
                coords.extend([x, y]);
            }
        }
        Self {
            height,
            width,
            coords,
        }
    }

    /// The identity lattice.
    pub fn lattice(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |i, j| {
            (lattice_coord(j, width), lattice_coord(i, height))
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[f32] {
        &self.coords
    }

    pub fn get(&self, i: usize, j: usize) -> (f32, f32) {
        let k = (i * self.width + j) * 2;
        (self.coords[k], self.coords[k + 1])
    }

    /// `[1, H, W, 2]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width, 2], self.coords.clone())
    }
}

/// Per-pixel absolute source coordinates in `[-1, 1]`, `(x, y)` interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    flow: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, flow: Vec<f32>) -> Result<Self> {
        if flow.len() != height * width * 2 {
            return Err(Error::Shape(format!(
                "flow {height}x{width} got {} values",
                flow.len()
            )));
        }
        if flow.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow field"));
        }
        if let Some(v) = flow.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("flow value {v} outside [-1, 1]")));
        }
        Ok(Self {
            height,
            width,
            flow,
        })
    }

    /// Item `index` of a channel-first `[N, 2, H, W]` flow tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 2 || index >= s[0] {
            return Err(Error::Shape(format!("cannot take flow {index} from {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let item = t
            .narrow(0, index, 1)
            .reshape(&[2, h, w])
            .permute(&[1, 2, 0]);
        Self::new(h, w, item.to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.flow
    }
}

/// Normalized coordinate of pixel `j` along an axis of length `n`.
pub fn lattice_coord(j: usize, n: usize) -> f32 {
    if n <= 1 {
        0.0
    } else {
        (-1.0 + 2.0 * j as f64 / (n - 1) as f64) as f32
    }
}

/// Homogeneous lattice `[H*W, 3]` of `(x, y, 1)` rows.
pub fn lattice_tensor(height: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(height * width * 3);
    for i in 0..height {
        for j in 0..width {
            data.extend([lattice_coord(j, width), lattice_coord(i, height), 1.0]);
        }
    }
    Tensor::new(&[height * width, 3], data)
}

fn check_out_dims(out_h: usize, out_w: usize) -> Result<()> {
    if out_h < 2 || out_w < 2 {
        return Err(Error::Shape(format!(
            "output grid {out_h}x{out_w} must be at least 2x2"
        )));
    }
    Ok(())
}

pub fn affine_grid(theta: &AffineParams, out_h: usize, out_w: usize) -> Result<SampleGrid> {
    check_out_dims(out_h, out_w)?;
    let grid = no_grad(|| affine_grid_var(&Var::constant(theta.to_tensor()), out_h, out_w));
    SampleGrid::new(out_h, out_w, grid.value().to_vec())
}

/// `theta: [N, 2, 3]` to a grid `[N, H, W, 2]`.
pub fn affine_grid_var(theta: &Var, out_h: usize, out_w: usize) -> Var {
    let n = theta.shape()[0];
    let lattice = Var::constant(lattice_tensor(out_h, out_w));
    Var::matmul(&lattice, &theta.reshape(&[n * 2, 3]), false, true)
        .reshape(&[out_h * out_w, n, 2])
        .permute(&[1, 0, 2])
        .reshape(&[n, out_h, out_w, 2])
}

pub fn bilinear_sample(src: &Image, grid: &SampleGrid, background: f32) -> Result<Image> {
    let out = no_grad(|| {
        bilinear_sample_var(
            &Var::constant(src.to_tensor()),
            &Var::constant(grid.to_tensor()),
            background,
        )
    })?;
    Image::from_tensor(out.value(), 0)
}

/// Samples `src: [N, C, H, W]` at `grid: [N, Ho, Wo, 2]`, producing
/// `[N, C, Ho, Wo]`. Corners falling outside the source read `background`.
/// Differentiable in both `src` and `grid`.
pub fn bilinear_sample_var(src: &Var, grid: &Var, background: f32) -> Result<Var> {
    let ss = src.shape();
    let gs = grid.shape();
    if ss.len() != 4 || gs.len() != 4 || gs[3] != 2 || gs[0] != ss[0] {
        return Err(Error::Shape(format!(
            "bilinear_sample: src {ss:?}, grid {gs:?}"
        )));
    }
    if grid.value().data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampling grid"));
    }
    let (n, c, h, w) = (ss[0], ss[1], ss[2], ss[3]);
    let (ho, wo) = (gs[1], gs[2]);
    let plane = ho * wo;

    // pixel-space coordinates
    let gx = grid.narrow(3, 0, 1).reshape(&[n, 1, ho, wo]);
    let gy = grid.narrow(3, 1, 1).reshape(&[n, 1, ho, wo]);
    let px = gx.add_scalar(1.0).mul_scalar((w as f32 - 1.0) / 2.0);
    let py = gy.add_scalar(1.0).mul_scalar((h as f32 - 1.0) / 2.0);

    let (x0, fx) = split_coord(px.value());
    let (y0, fy) = split_coord(py.value());
    // fractional weights with straight-through snapping
    let wx1 = px.sub(&Var::constant(px.value().zip_map(&fx, |p, f| p - f)));
    let wy1 = py.sub(&Var::constant(py.value().zip_map(&fy, |p, f| p - f)));
    let wx0 = wx1.rsub_scalar(1.0);
    let wy0 = wy1.rsub_scalar(1.0);

    let total = n * c * h * w;
    let flat = Var::concat(&[&src.reshape(&[total]), &Var::full(&[1], background)], 0);
    let corner = |dy: i64, dx: i64| {
        let mut index = Vec::with_capacity(n * c * plane);
        for b in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    let yy = y0[b * plane + p] + dy;
                    let xx = x0[b * plane + p] + dx;
                    let inside = yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w;
                    index.push(if inside {
                        (((b * c + ch) * h + yy as usize) * w + xx as usize) as u32
                    } else {
                        total as u32
                    });
                }
            }
        }
        flat.gather(Arc::new(index), &[n, c, ho, wo])
    };
    let out = corner(0, 0)
        .mul(&wy0.mul(&wx0))
        .add(&corner(0, 1).mul(&wy0.mul(&wx1)))
        .add(&corner(1, 0).mul(&wy1.mul(&wx0)))
        .add(&corner(1, 1).mul(&wy1.mul(&wx1)));
    Ok(out)
}

/// Integer base index and snapped fractional part of each pixel coordinate.
fn split_coord(p: &Tensor) -> (Vec<i64>, Tensor) {
    let mut base = Vec::with_capacity(p.numel());
    let mut frac = Vec::with_capacity(p.numel());
    for &v in p.data() {
        let r = v.round();
        let (b, f) = if (v - r).abs() < SNAP {
            (r, 0.0)
        } else {
            (v.floor(), v - v.floor())
        };
        base.push(b.clamp(-1e9, 1e9) as i64);
        frac.push(f);
    }
    (base, Tensor::new(p.shape(), frac))
}

pub fn flow_to_grid(flow: &FlowField) -> SampleGrid {
    SampleGrid {
        height: flow.height,
        width: flow.width,
        coords: flow.flow.clone(),
    }
}

/// Channel-first flow `[N, 2, H, W]` to a grid `[N, H, W, 2]`.
pub fn flow_to_grid_var(flow: &Var) -> Var {
    flow.permute(&[0, 2, 3, 1])
}

/// Warps `img` by `theta` into an image of the same size.
pub fn warp_affine(img: &Image, theta: &AffineParams, background: f32) -> Result<Image> {
    let grid = affine_grid(theta, img.height(), img.width())?;
    bilinear_sample(img, &grid, background)
}
