//! Dense, immutable, row-major `f32` tensors and the raw kernels the graph
//! ops are built on. Nothing in this module tracks gradients.

use std::fmt;
use std::sync::Arc;

/// A contiguous row-major tensor. Cloning is cheap (the buffer is shared).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data.as_slice())?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, aligned from the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside an output of rank `rank`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let own = strides(shape);
    let mut s = vec![0; rank];
    for i in 0..shape.len() {
        let j = i + rank - shape.len();
        if shape[i] != 1 {
            debug_assert_eq!(shape[i], out[j]);
            s[j] = own[i];
        }
    }
    s
}

/// Walks `shape` in row-major order, calling `f(offsets, run)` once per innermost run,
/// where `offsets[k]` is the starting offset of the run in operand `k` (given its strides).
fn for_each_run(shape: &[usize], operand_strides: &[&[usize]], mut f: impl FnMut(&[usize], usize)) {
    let rank = shape.len();
    let ops = operand_strides.len();
    if rank == 0 {
        f(&vec![0; ops], 1);
        return;
    }
    if shape.contains(&0) {
        return;
    }
    let run = shape[rank - 1];
    let outer: usize = shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut offs = vec![0usize; ops];
    for _ in 0..outer {
        f(&offs, run);
        // advance the odometer over the outer axes
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            for (k, s) in operand_strides.iter().enumerate() {
                offs[k] += s[ax];
            }
            if idx[ax] < shape[ax] {
                break;
            }
            for (k, s) in operand_strides.iter().enumerate() {
                offs[k] -= s[ax] * shape[ax];
            }
            idx[ax] = 0;
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match buffer of length {}",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(&[], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// Mutable access to the buffer, copying it first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} to {:?}",
            self.shape,
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise binary op with numpy broadcasting.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Tensor::new(&self.shape, data);
        }
        if other.numel() == 1 && other.rank() <= self.rank() {
            let b = other.data[0];
            return Tensor::new(&self.shape, self.data.iter().map(|&a| f(a, b)).collect());
        }
        if self.numel() == 1 && self.rank() <= other.rank() {
            let a = self.data[0];
            return Tensor::new(&other.shape, other.data.iter().map(|&b| f(a, b)).collect());
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!(
                "shapes {:?} and {:?} do not broadcast",
                self.shape, other.shape
            )
        });
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let rank = out_shape.len();
        let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
        let mut out = Vec::with_capacity(numel(&out_shape));
        let (a, b) = (&self.data, &other.data);
        for_each_run(&out_shape, &[&sa, &sb], |offs, run| {
            let (oa, ob) = (offs[0], offs[1]);
            for i in 0..run {
                out.push(f(a[oa + i * ia], b[ob + i * ib]));
            }
        });
        Tensor::new(&out_shape, out)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let s = broadcast_strides(&self.shape, shape);
        let step = s.last().copied().unwrap_or(0);
        let mut out = Vec::with_capacity(numel(shape));
        for_each_run(shape, &[&s], |offs, run| {
            for i in 0..run {
                out.push(self.data[offs[0] + i * step]);
            }
        });
        Tensor::new(shape, out)
    }

    /// Sums over broadcast axes so the result has `target` shape. Accumulates in f64.
    pub fn sum_to(&self, target: &[usize]) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        if numel(target) == 1 {
            let s: f64 = self.data.iter().map(|&v| v as f64).sum();
            return Tensor::new(target, vec![s as f32]);
        }
        let rank = self.rank();
        assert!(
            target.len() <= rank,
            "cannot sum {:?} to {:?}",
            self.shape,
            target
        );
        let s = broadcast_strides(target, &self.shape);
        let own = strides(&self.shape);
        let step = s[rank - 1];
        let mut acc = vec![0f64; numel(target)];
        for_each_run(&self.shape, &[&own, &s], |offs, run| {
            let (src, dst) = (offs[0], offs[1]);
            if step == 0 {
                let mut sum = 0f64;
                for i in 0..run {
                    sum += self.data[src + i] as f64;
                }
                acc[dst] += sum;
            } else {
                for i in 0..run {
                    acc[dst + i * step] += self.data[src + i] as f64;
                }
            }
        });
        Tensor::new(target, acc.into_iter().map(|v| v as f32).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel().max(1) as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        assert_eq!(axes.len(), self.rank());
        let own = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let s: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
        let step = s.last().copied().unwrap_or(0);
        let mut out = Vec::with_capacity(self.numel());
        for_each_run(&out_shape, &[&s], |offs, run| {
            for i in 0..run {
                out.push(self.data[offs[0] + i * step]);
            }
        });
        Tensor::new(&out_shape, out)
    }

    pub(crate) fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, dim, inner) = self.split_at_axis(axis);
        assert!(
            start + len <= dim,
            "narrow {start}+{len} out of range {dim}"
        );
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(&shape, out)
    }

    /// Zero-pad `before`/`after` entries along `axis`.
    pub fn pad_axis(&self, axis: usize, before: usize, after: usize) -> Tensor {
        let (outer, dim, inner) = self.split_at_axis(axis);
        let new_dim = before + dim + after;
        let mut out = vec![0.0; outer * new_dim * inner];
        for o in 0..outer {
            let dst = (o * new_dim + before) * inner;
            let src = o * dim * inner;
            out[dst..dst + dim * inner].copy_from_slice(&self.data[src..src + dim * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = new_dim;
        Tensor::new(&shape, out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let first = parts[0];
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        for p in parts {
            assert_eq!(p.rank(), first.rank());
            for (i, (&a, &b)) in p.shape.iter().zip(first.shape.iter()).enumerate() {
                assert!(
                    i == axis || a == b,
                    "concat shape mismatch {:?} vs {:?}",
                    p.shape,
                    first.shape
                );
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let (_, dim, inner) = p.split_at_axis(axis);
                let chunk = dim * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(&shape, out)
    }

    /// `op(a) @ op(b)` for 2-D operands, where `op` optionally transposes.
    pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
        assert_eq!(a.rank(), 2, "matmul lhs must be 2-D, got {:?}", a.shape);
        assert_eq!(b.rank(), 2, "matmul rhs must be 2-D, got {:?}", b.shape);
        let (m, k) = if ta {
            (a.shape[1], a.shape[0])
        } else {
            (a.shape[0], a.shape[1])
        };
        let (k2, n) = if tb {
            (b.shape[1], b.shape[0])
        } else {
            (b.shape[0], b.shape[1])
        };
        assert_eq!(
            k, k2,
            "matmul inner dims differ: {:?} x {:?} (ta={ta}, tb={tb})",
            a.shape, b.shape
        );
        let mut out = vec![0.0f32; m * n];
        let (rsa, csa) = if ta {
            (1, a.shape[1] as isize)
        } else {
            (a.shape[1] as isize, 1)
        };
        let (rsb, csb) = if tb {
            (1, b.shape[1] as isize)
        } else {
            (b.shape[1] as isize, 1)
        };
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: the slices cover m*k, k*n and m*n elements under the given strides.
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.data.as_ptr(),
                    rsa,
                    csa,
                    b.data.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// `out.flat[i] = self.flat[index[i]]`.
    pub fn gather(&self, index: &[u32], out_shape: &[usize]) -> Tensor {
        assert_eq!(numel(out_shape), index.len());
        Tensor::new(
            out_shape,
            index.iter().map(|&i| self.data[i as usize]).collect(),
        )
    }

    /// Adjoint of [`Tensor::gather`]: `out.flat[index[i]] += self.flat[i]`.
    pub fn scatter_add(&self, index: &[u32], out_shape: &[usize]) -> Tensor {
        assert_eq!(self.numel(), index.len());
        let mut out = vec![0.0f32; numel(out_shape)];
        for (&i, &v) in index.iter().zip(self.data.iter()) {
            out[i as usize] += v;
        }
        Tensor::new(out_shape, out)
    }
}

/// Geometry of a square-kernel 2-D convolution over an `[N, C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn col_shape(&self) -> [usize; 2] {
        let (oh, ow) = self.out_hw();
        [
            self.channels * self.kernel * self.kernel,
            self.batch * oh * ow,
        ]
    }

    pub fn image_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    /// Visits every (column element, image element) pair that is in bounds.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_hw();
        let k = self.kernel;
        let cols = self.batch * oh * ow;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for n in 0..self.batch {
                        let img_base = (n * self.channels + c) * self.height * self.width;
                        let col_base = row * cols + n * oh * ow;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let row_base = img_base + iy as usize * self.width;
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                f(col_base + oy * ow + ox, row_base + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `[N, C, H, W]` patches into `[C*k*k, N*OH*OW]` columns.
pub fn im2col(x: &Tensor, g: &ConvGeom) -> Tensor {
    assert_eq!(x.shape(), g.image_shape(), "im2col geometry mismatch");
    let shape = g.col_shape();
    let mut out = vec![0.0f32; shape[0] * shape[1]];
    let src = x.data();
    g.for_each_tap(|col, img| out[col] = src[img]);
    Tensor::new(&shape, out)
}

/// Adjoint of [`im2col`]: folds columns back, summing overlapping taps.
pub fn col2im(cols: &Tensor, g: &ConvGeom) -> Tensor {
    assert_eq!(cols.shape(), g.col_shape(), "col2im geometry mismatch");
    let shape = g.image_shape();
    let mut out = vec![0.0f32; numel(&shape)];
    let src = cols.data();
    g.for_each_tap(|col, img| out[img] += src[col]);
    Tensor::new(&shape, out)
}
