//! Parameters, the [`Module`] visitor trait, and the handful of layers the
//! networks are assembled from.

use std::sync::RwLock;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::Var;
use crate::tensor::Tensor;

/// A named tensor owned by a module. Trainable parameters are graph leaves;
/// buffers (e.g. running statistics) are constants.
pub struct Param {
    var: RwLock<Var>,
    trainable: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self {
            var: RwLock::new(Var::leaf(value)),
            trainable: true,
        }
    }

    pub fn buffer(value: Tensor) -> Self {
        Self {
            var: RwLock::new(Var::constant(value)),
            trainable: false,
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// The current graph leaf. Gradients are looked up by this node.
    pub fn var(&self) -> Var {
        self.var.read().expect("param lock poisoned").clone()
    }

    pub fn value(&self) -> Tensor {
        self.var().value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.var().shape().to_vec()
    }

    /// Replaces the value with a fresh leaf (or constant for buffers).
    pub fn set(&self, value: Tensor) {
        assert_eq!(value.shape(), self.var().shape(), "parameter shape change");
        let var = if self.trainable {
            Var::leaf(value)
        } else {
            Var::constant(value)
        };
        *self.var.write().expect("param lock poisoned") = var;
    }
}

impl Clone for Param {
    /// Deep copy with a fresh graph identity.
    fn clone(&self) -> Self {
        let value = self.value();
        if self.trainable {
            Param::new(value)
        } else {
            Param::buffer(value)
        }
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({:?}, trainable={})", self.shape(), self.trainable)
    }
}

/// Anything that owns parameters. Names are dot-separated paths.
pub trait Module {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_param("", &mut |name, p| out.push((name.to_string(), p.value())));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param("", &mut |_, p| {
            if p.trainable() {
                n += p.value().numel()
            }
        });
        n
    }
}

/// Joins a parent prefix and a field name into a child prefix.
pub fn child(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Module for Param {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(prefix, self)
    }
}

impl<M: Module> Module for Vec<M> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, m) in self.iter().enumerate() {
            m.for_each_param(&child(prefix, &i.to_string()), f);
        }
    }
}

impl<M: Module> Module for Option<M> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(m) = self {
            m.for_each_param(prefix, f);
        }
    }
}

/// Implements [`Module`] for a struct by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_module {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Module for $ty {
            fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &$crate::nn::Param)) {
                $( $crate::nn::Module::for_each_param(&self.$field, &$crate::nn::child(prefix, stringify!($field)), f); )*
            }
        }
    };
}

/// Forward-pass context: train/eval mode and the dropout stream.
pub struct Ctx {
    pub train: bool,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Inverted dropout; identity in eval mode.
pub fn dropout(x: &Var, rate: f32, ctx: &mut Ctx) -> Var {
    if !ctx.train || rate <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 - rate;
    let mask: Vec<f32> = (0..x.value().numel())
        .map(|_| {
            if ctx.rng.random::<f32>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    x.mul(&Var::from_vec(x.shape(), mask))
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}
impl_module!(Conv2d { weight, bias });

impl Conv2d {
    pub fn new(
        rng: &mut impl Rng,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let bound = 1.0 / ((in_c * kernel * kernel) as f32).sqrt();
        Self {
            weight: Param::new(uniform(rng, &[out_c, in_c, kernel, kernel], bound)),
            bias: Some(Param::new(uniform(rng, &[out_c], bound))),
            stride,
            padding,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn forward(&self, x: &Var) -> Var {
        let bias = self.bias.as_ref().map(Param::var);
        x.conv2d(&self.weight.var(), bias.as_ref(), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}
impl_module!(ConvTranspose2d { weight, bias });

impl ConvTranspose2d {
    pub fn new(
        rng: &mut impl Rng,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let bound = 1.0 / ((out_c * kernel * kernel) as f32).sqrt();
        Self {
            weight: Param::new(uniform(rng, &[in_c, out_c, kernel, kernel], bound)),
            bias: Some(Param::new(uniform(rng, &[out_c], bound))),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let bias = self.bias.as_ref().map(Param::var);
        x.conv_transpose2d(&self.weight.var(), bias.as_ref(), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}
impl_module!(Linear { weight, bias });

impl Linear {
    pub fn new(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input as f32).sqrt();
        Self {
            weight: Param::new(uniform(rng, &[output, input], bound)),
            bias: Param::new(uniform(rng, &[output], bound)),
        }
    }

    /// `[N, in] -> [N, out]`.
    pub fn forward(&self, x: &Var) -> Var {
        Var::matmul(x, &self.weight.var(), false, true).add(&self.bias.var())
    }
}

/// Batch normalization over `(N, H, W)` with running statistics for eval mode.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub eps: f32,
}
impl_module!(BatchNorm2d {
    gamma,
    beta,
    running_mean,
    running_var
});

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(&[1, channels, 1, 1])),
            beta: Param::new(Tensor::zeros(&[1, channels, 1, 1])),
            running_mean: Param::buffer(Tensor::zeros(&[1, channels, 1, 1])),
            running_var: Param::buffer(Tensor::ones(&[1, channels, 1, 1])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var, ctx: &Ctx) -> Var {
        let (mean, var) = if ctx.train {
            let mean = x.mean_axes(&[0, 2, 3]);
            let var = x.sub(&mean).square().mean_axes(&[0, 2, 3]);
            let m = self.momentum;
            let n = (x.value().numel() / x.shape()[1]) as f32;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            self.running_mean.set(
                self.running_mean
                    .value()
                    .zip_map(mean.value(), |r, b| (1.0 - m) * r + m * b),
            );
            self.running_var.set(
                self.running_var
                    .value()
                    .zip_map(var.value(), |r, b| (1.0 - m) * r + m * b * unbiased),
            );
            (mean, var)
        } else {
            (self.running_mean.var(), self.running_var.var())
        };
        let normalized = x.sub(&mean).div(&var.add_scalar(self.eps).sqrt());
        normalized.mul(&self.gamma.var()).add(&self.beta.var())
    }
}
