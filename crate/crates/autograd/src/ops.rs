//! Differentiable operations on [`Var`]. Each backward rule is expressed with
//! these same operations so gradients can be differentiated again.

use std::sync::Arc;

use crate::graph::Var;
use crate::tensor::{col2im, im2col, ConvGeom, Tensor};

fn unbroadcast(g: &Var, shape: &[usize]) -> Var {
    if g.shape() == shape {
        g.clone()
    } else {
        g.sum_to(shape)
    }
}

fn only(needs: &[bool], i: usize, f: impl FnOnce() -> Var) -> Option<Var> {
    needs[i].then(f)
}

impl Var {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Var {
        Var::constant(Tensor::new(shape, data))
    }

    pub fn zeros(shape: &[usize]) -> Var {
        Var::constant(Tensor::zeros(shape))
    }

    pub fn full(shape: &[usize], value: f32) -> Var {
        Var::constant(Tensor::full(shape, value))
    }

    // ---- elementwise binary (broadcasting) ----

    pub fn add(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::record(value, &[self, other], move |_, g, n| {
            vec![
                only(n, 0, || unbroadcast(g, &sa)),
                only(n, 1, || unbroadcast(g, &sb)),
            ]
        })
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::record(value, &[self, other], move |_, g, n| {
            vec![
                only(n, 0, || unbroadcast(g, &sa)),
                only(n, 1, || unbroadcast(&g.neg(), &sb)),
            ]
        })
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        let (a, b) = (self.clone(), other.clone());
        Var::record(value, &[self, other], move |_, g, n| {
            vec![
                only(n, 0, || unbroadcast(&g.mul(&b), a.shape())),
                only(n, 1, || unbroadcast(&g.mul(&a), b.shape())),
            ]
        })
    }

    pub fn div(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a / b);
        let (a, b) = (self.clone(), other.clone());
        Var::record(value, &[self, other], move |_, g, n| {
            vec![
                only(n, 0, || unbroadcast(&g.div(&b), a.shape())),
                only(n, 1, || {
                    unbroadcast(&g.mul(&a).div(&b.square()).neg(), b.shape())
                }),
            ]
        })
    }

    // ---- elementwise unary ----

    pub fn neg(&self) -> Var {
        Var::record(self.value().map(|v| -v), &[self], |_, g, _| {
            vec![Some(g.neg())]
        })
    }

    pub fn add_scalar(&self, s: f32) -> Var {
        Var::record(self.value().map(|v| v + s), &[self], |_, g, _| {
            vec![Some(g.clone())]
        })
    }

    pub fn mul_scalar(&self, s: f32) -> Var {
        Var::record(self.value().map(|v| v * s), &[self], move |_, g, _| {
            vec![Some(g.mul_scalar(s))]
        })
    }

    /// `s - self`.
    pub fn rsub_scalar(&self, s: f32) -> Var {
        Var::record(self.value().map(|v| s - v), &[self], |_, g, _| {
            vec![Some(g.neg())]
        })
    }

    pub fn square(&self) -> Var {
        let a = self.clone();
        Var::record(self.value().map(|v| v * v), &[self], move |_, g, _| {
            vec![Some(g.mul(&a).mul_scalar(2.0))]
        })
    }

    pub fn exp(&self) -> Var {
        Var::record(self.value().map(f32::exp), &[self], |out, g, _| {
            vec![Some(g.mul(out))]
        })
    }

    pub fn ln(&self) -> Var {
        let a = self.clone();
        Var::record(self.value().map(f32::ln), &[self], move |_, g, _| {
            vec![Some(g.div(&a))]
        })
    }

    pub fn sqrt(&self) -> Var {
        Var::record(self.value().map(f32::sqrt), &[self], |out, g, _| {
            vec![Some(g.div(out).mul_scalar(0.5))]
        })
    }

    pub fn tanh(&self) -> Var {
        Var::record(self.value().map(f32::tanh), &[self], |out, g, _| {
            vec![Some(g.mul(&out.square().rsub_scalar(1.0)))]
        })
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        Var::record(value, &[self], |out, g, _| {
            vec![Some(g.mul(out).mul(&out.rsub_scalar(1.0)))]
        })
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self) -> Var {
        let a = self.clone();
        let value = self.value().map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        Var::record(value, &[self], move |_, g, _| {
            vec![Some(g.mul(&a.sigmoid()))]
        })
    }

    /// Multiplies the incoming gradient by a constant derived from the input.
    fn gated(&self, value: Tensor, gate: impl Fn(f32) -> f32) -> Var {
        let mask = Var::constant(self.value().map(gate));
        Var::record(value, &[self], move |_, g, _| vec![Some(g.mul(&mask))])
    }

    pub fn relu(&self) -> Var {
        self.gated(self.value().map(|v| v.max(0.0)), |v| {
            if v > 0.0 {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn leaky_relu(&self, slope: f32) -> Var {
        self.gated(
            self.value().map(|v| if v > 0.0 { v } else { slope * v }),
            move |v| if v > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn abs(&self) -> Var {
        self.gated(self.value().map(f32::abs), |v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Var {
        self.gated(self.value().map(|v| v.clamp(lo, hi)), move |v| {
            if v >= lo && v <= hi {
                1.0
            } else {
                0.0
            }
        })
    }

    // ---- reductions and broadcasting ----

    pub fn sum_to(&self, shape: &[usize]) -> Var {
        let src = self.shape().to_vec();
        Var::record(self.value().sum_to(shape), &[self], move |_, g, _| {
            vec![Some(g.broadcast_to(&src))]
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        let src = self.shape().to_vec();
        Var::record(self.value().broadcast_to(shape), &[self], move |_, g, _| {
            vec![Some(g.sum_to(&src))]
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel().max(1) as f32;
        self.sum().mul_scalar(1.0 / n)
    }

    fn kept_shape(&self, axes: &[usize]) -> Vec<usize> {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        shape
    }

    pub fn sum_axes(&self, axes: &[usize]) -> Var {
        self.sum_to(&self.kept_shape(axes))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes).mul_scalar(1.0 / n.max(1) as f32)
    }

    /// Maximum along `axis` (kept as size 1). Not differentiable; used for stabilization.
    pub fn max_axis_detached(&self, axis: usize) -> Var {
        let t = self.value();
        let (outer, dim, inner) = t.split_at_axis(axis);
        let mut out = vec![f32::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                for i in 0..inner {
                    let v = t.data()[(o * dim + d) * inner + i];
                    let slot = &mut out[o * inner + i];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
        Var::constant(Tensor::new(&self.kept_shape(&[axis]), out))
    }

    pub fn softmax(&self, axis: usize) -> Var {
        let e = self.sub(&self.max_axis_detached(axis)).exp();
        let s = e.sum_axes(&[axis]);
        e.div(&s)
    }

    pub fn log_softmax(&self, axis: usize) -> Var {
        let shifted = self.sub(&self.max_axis_detached(axis));
        shifted.sub(&shifted.exp().sum_axes(&[axis]).ln())
    }

    // ---- shape ----

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let src = self.shape().to_vec();
        Var::record(self.value().reshape(shape), &[self], move |_, g, _| {
            vec![Some(g.reshape(&src))]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Var::record(self.value().permute(axes), &[self], move |_, g, _| {
            vec![Some(g.permute(&inverse))]
        })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let dim = self.shape()[axis];
        Var::record(
            self.value().narrow(axis, start, len),
            &[self],
            move |_, g, _| vec![Some(g.pad_axis(axis, start, dim - start - len))],
        )
    }

    pub fn pad_axis(&self, axis: usize, before: usize, after: usize) -> Var {
        let dim = self.shape()[axis];
        Var::record(
            self.value().pad_axis(axis, before, after),
            &[self],
            move |_, g, _| vec![Some(g.narrow(axis, before, dim))],
        )
    }

    pub fn concat(parts: &[&Var], axis: usize) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat(&tensors, axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::record(value, parts, move |_, g, n| {
            let mut start = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(i, &len)| {
                    let s = start;
                    start += len;
                    only(n, i, || g.narrow(axis, s, len))
                })
                .collect()
        })
    }

    // ---- linear algebra and convolution plumbing ----

    /// `op(a) @ op(b)` on 2-D operands; `ta`/`tb` select transposition.
    pub fn matmul(a: &Var, b: &Var, ta: bool, tb: bool) -> Var {
        let value = Tensor::matmul(a.value(), b.value(), ta, tb);
        let (av, bv) = (a.clone(), b.clone());
        Var::record(value, &[a, b], move |_, g, n| {
            let ga = only(n, 0, || {
                if ta {
                    Var::matmul(&bv, g, tb, true)
                } else {
                    Var::matmul(g, &bv, false, !tb)
                }
            });
            let gb = only(n, 1, || {
                if tb {
                    Var::matmul(g, &av, true, ta)
                } else {
                    Var::matmul(&av, g, !ta, false)
                }
            });
            vec![ga, gb]
        })
    }

    pub fn im2col(&self, geom: ConvGeom) -> Var {
        Var::record(im2col(self.value(), &geom), &[self], move |_, g, _| {
            vec![Some(g.col2im(geom))]
        })
    }

    pub fn col2im(&self, geom: ConvGeom) -> Var {
        Var::record(col2im(self.value(), &geom), &[self], move |_, g, _| {
            vec![Some(g.im2col(geom))]
        })
    }

    /// `out.flat[i] = self.flat[index[i]]`.
    pub fn gather(&self, index: Arc<Vec<u32>>, out_shape: &[usize]) -> Var {
        let src = self.shape().to_vec();
        let value = self.value().gather(&index, out_shape);
        Var::record(value, &[self], move |_, g, _| {
            vec![Some(g.scatter_add(Arc::clone(&index), &src))]
        })
    }

    pub fn scatter_add(&self, index: Arc<Vec<u32>>, out_shape: &[usize]) -> Var {
        let src = self.shape().to_vec();
        let value = self.value().scatter_add(&index, out_shape);
        Var::record(value, &[self], move |_, g, _| {
            vec![Some(g.gather(Arc::clone(&index), &src))]
        })
    }

    /// 2-D convolution of `[N, C, H, W]` by `weight: [O, C, k, k]`.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, padding: usize) -> Var {
        let [n, c, h, w] = dims4(self.shape());
        let ws = weight.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, k, k]");
        assert_eq!(ws[1], c, "conv expects {} input channels, got {c}", ws[1]);
        let (out_c, k) = (ws[0], ws[2]);
        let geom = ConvGeom {
            batch: n,
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
        };
        let (oh, ow) = geom.out_hw();
        let cols = self.im2col(geom);
        let flat = weight.reshape(&[out_c, c * k * k]);
        let out = Var::matmul(&flat, &cols, false, false)
            .reshape(&[out_c, n, oh, ow])
            .permute(&[1, 0, 2, 3]);
        match bias {
            Some(b) => out.add(&b.reshape(&[1, out_c, 1, 1])),
            None => out,
        }
    }

    /// Transposed convolution of `[N, C, H, W]` by `weight: [C, O, k, k]`.
    pub fn conv_transpose2d(
        &self,
        weight: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Var {
        let [n, c, h, w] = dims4(self.shape());
        let ws = weight.shape();
        assert_eq!(ws.len(), 4, "conv-transpose weight must be [C, O, k, k]");
        assert_eq!(
            ws[0], c,
            "conv-transpose expects {} input channels, got {c}",
            ws[0]
        );
        let (out_c, k) = (ws[1], ws[2]);
        let oh = (h - 1) * stride + k - 2 * padding;
        let ow = (w - 1) * stride + k - 2 * padding;
        let geom = ConvGeom {
            batch: n,
            channels: out_c,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            padding,
        };
        debug_assert_eq!(geom.out_hw(), (h, w));
        let x = self.permute(&[1, 0, 2, 3]).reshape(&[c, n * h * w]);
        let flat = weight.reshape(&[c, out_c * k * k]);
        let out = Var::matmul(&flat, &x, true, false).col2im(geom);
        match bias {
            Some(b) => out.add(&b.reshape(&[1, out_c, 1, 1])),
            None => out,
        }
    }

    /// Non-overlapping max pooling with window `k`.
    pub fn max_pool2d(&self, k: usize) -> Var {
        let [n, c, h, w] = dims4(self.shape());
        let (oh, ow) = (h / k, w / k);
        let data = self.value().data();
        let mut index = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * w + ox * k + dx;
                            if data[i] > data[best] {
                                best = i;
                            }
                        }
                    }
                    index.push(best as u32);
                }
            }
        }
        self.gather(Arc::new(index), &[n, c, oh, ow])
    }
}

pub(crate) fn dims4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected a 4-D tensor, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

impl std::ops::Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        Var::add(self, rhs)
    }
}

impl std::ops::Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        Var::sub(self, rhs)
    }
}

impl std::ops::Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        Var::mul(self, rhs)
    }
}

impl std::ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}
