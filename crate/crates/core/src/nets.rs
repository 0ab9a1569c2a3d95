//! Network architectures: the skip-connected encoder–decoder used by the
//! generators, patch discriminators, the relative-STN localization net and the
//! appearance-flow encoder–decoder.

use codegan_autograd::nn::{dropout, BatchNorm2d, Conv2d, ConvTranspose2d, Linear};
use codegan_autograd::{impl_module, Ctx, Param, Tensor, Var};
use rand::Rng;

const LEAK: f32 = 0.2;
const DROPOUT: f32 = 0.5;
/// Number of innermost decoder blocks with dropout.
const DROPOUT_BLOCKS: usize = 3;

/// Channel width at encoder level `i`: doubles up to 8× the base width.
pub fn level_channels(nf: usize, i: usize) -> usize {
    nf << i.min(3)
}

#[derive(Clone, Debug)]
pub struct DownBlock {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
}
impl_module!(DownBlock { conv, bn });

/// Strided-convolution encoder returning every level's activation.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<DownBlock>,
}
impl_module!(Encoder { blocks });

impl Encoder {
    pub fn new(rng: &mut impl Rng, in_c: usize, nf: usize, depth: usize) -> Self {
        let blocks = (0..depth)
            .map(|i| {
                let cin = if i == 0 {
                    in_c
                } else {
                    level_channels(nf, i - 1)
                };
                let cout = level_channels(nf, i);
                DownBlock {
                    conv: Conv2d::new(rng, cin, cout, 4, 2, 1),
                    bn: (i > 0).then(|| BatchNorm2d::new(cout)),
                }
            })
            .collect();
        Self { blocks }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Pre-activation features of every level, shallowest first.
    pub fn forward(&self, x: &Var, ctx: &Ctx) -> Vec<Var> {
        let mut feats: Vec<Var> = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let input = if i == 0 {
                x.clone()
            } else {
                feats[i - 1].leaky_relu(LEAK)
            };
            let mut h = block.conv.forward(&input);
            if let Some(bn) = &block.bn {
                h = bn.forward(&h, ctx);
            }
            feats.push(h);
        }
        feats
    }
}

#[derive(Clone, Debug)]
pub struct UpBlock {
    pub conv: ConvTranspose2d,
    pub bn: Option<BatchNorm2d>,
    pub dropout: bool,
}
impl_module!(UpBlock { conv, bn });

/// Transposed-convolution decoder mirroring an [`Encoder`], with skip
/// connections from every encoder level. Returns raw (pre-activation) output.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<UpBlock>,
}
impl_module!(Decoder { blocks });

impl Decoder {
    pub fn new(rng: &mut impl Rng, out_c: usize, nf: usize, depth: usize) -> Self {
        let blocks = (0..depth)
            .map(|j| {
                let cin = if j == 0 {
                    level_channels(nf, depth - 1)
                } else {
                    2 * level_channels(nf, depth - 1 - j)
                };
                let last = j == depth - 1;
                let cout = if last {
                    out_c
                } else {
                    level_channels(nf, depth - 2 - j)
                };
                UpBlock {
                    conv: ConvTranspose2d::new(rng, cin, cout, 4, 2, 1),
                    bn: (!last).then(|| BatchNorm2d::new(cout)),
                    dropout: !last && j < DROPOUT_BLOCKS,
                }
            })
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, feats: &[Var], ctx: &mut Ctx) -> Var {
        let depth = self.blocks.len();
        assert_eq!(feats.len(), depth, "decoder expects {depth} encoder levels");
        let mut h = feats[depth - 1].clone();
        for (j, block) in self.blocks.iter().enumerate() {
            h = block.conv.forward(&h.relu());
            if let Some(bn) = &block.bn {
                h = bn.forward(&h, ctx);
            }
            if block.dropout {
                h = dropout(&h, DROPOUT, ctx);
            }
            if j + 1 < depth {
                h = Var::concat(&[&h, &feats[depth - 2 - j]], 1);
            }
        }
        h
    }
}

/// Encoder–decoder generator with skip connections.
#[derive(Clone, Debug)]
pub struct UNet {
    pub encoder: Encoder,
    pub decoder: Decoder,
}
impl_module!(UNet { encoder, decoder });

impl UNet {
    pub fn new(rng: &mut impl Rng, in_c: usize, out_c: usize, nf: usize, depth: usize) -> Self {
        Self {
            encoder: Encoder::new(rng, in_c, nf, depth),
            decoder: Decoder::new(rng, out_c, nf, depth),
        }
    }

    /// Raw output; callers apply the output nonlinearity.
    pub fn forward(&self, x: &Var, ctx: &mut Ctx) -> Var {
        let feats = self.encoder.forward(x, ctx);
        self.decoder.forward(&feats, ctx)
    }
}

/// Anything that scores inputs with unnormalized realism logits.
pub trait Critic {
    fn logits(&self, input: &Var) -> Var;
}

/// A critic scoring `condition ⊕ input` along the channel axis.
pub struct Conditioned<'a> {
    pub critic: &'a dyn Critic,
    pub condition: Var,
}

impl Critic for Conditioned<'_> {
    fn logits(&self, input: &Var) -> Var {
        self.critic
            .logits(&Var::concat(&[&self.condition, input], 1))
    }
}

/// Convolutional patch classifier emitting a map of logits.
#[derive(Clone, Debug)]
pub struct PatchD {
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub out: Conv2d,
}
impl_module!(PatchD { c1, c2, out });

impl PatchD {
    pub fn new(rng: &mut impl Rng, in_c: usize, nf: usize) -> Self {
        Self {
            c1: Conv2d::new(rng, in_c, nf, 4, 2, 1),
            c2: Conv2d::new(rng, nf, 2 * nf, 4, 2, 1),
            out: Conv2d::new(rng, 2 * nf, 1, 3, 1, 1),
        }
    }
}

impl Critic for PatchD {
    fn logits(&self, input: &Var) -> Var {
        let h = self.c1.forward(input).leaky_relu(LEAK);
        let h = self.c2.forward(&h).leaky_relu(LEAK);
        self.out.forward(&h)
    }
}

/// Localization network for the relative spatial transformer: maps a
/// 6-channel object pair to two 2×3 affines.
#[derive(Clone, Debug)]
pub struct Localizer {
    pub convs: Vec<Conv2d>,
    pub fc1: Linear,
    pub fc2: Linear,
}
impl_module!(Localizer { convs, fc1, fc2 });

impl Localizer {
    pub fn new(rng: &mut impl Rng, size: usize, channels: &[usize], hidden: usize) -> Self {
        let mut convs = Vec::new();
        let mut cin = 6;
        for &c in channels {
            convs.push(Conv2d::new(rng, cin, c, 5, 1, 2));
            cin = c;
        }
        let side = size >> channels.len();
        let fc1 = Linear::new(rng, cin * side * side, hidden);
        let fc2 = Linear {
            weight: Param::new(Tensor::zeros(&[12, hidden])),
            bias: Param::new(Tensor::new(
                &[12],
                vec![1., 0., 0., 0., 1., 0., 1., 0., 0., 0., 1., 0.],
            )),
        };
        Self { convs, fc1, fc2 }
    }

    /// `[N, 6, H, W]` to `[N, 2, 2, 3]`.
    pub fn forward(&self, pair: &Var) -> Var {
        let mut h = pair.clone();
        for conv in &self.convs {
            h = conv.forward(&h).max_pool2d(2).relu();
        }
        let n = h.shape()[0];
        let flat = h.reshape(&[n, h.value().numel() / n]);
        self.fc2
            .forward(&self.fc1.forward(&flat).relu())
            .reshape(&[n, 2, 2, 3])
    }
}

#[derive(Clone, Debug)]
pub struct ConvBnBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}
impl_module!(ConvBnBlock { conv, bn });

#[derive(Clone, Debug)]
pub struct UpBnBlock {
    pub conv: ConvTranspose2d,
    pub bn: Option<BatchNorm2d>,
}
impl_module!(UpBnBlock { conv, bn });

/// Plain strided encoder–decoder pair without skips, used by the flow network.
#[derive(Clone, Debug)]
pub struct PlainEncoder {
    pub blocks: Vec<ConvBnBlock>,
}
impl_module!(PlainEncoder { blocks });

impl PlainEncoder {
    pub fn new(rng: &mut impl Rng, in_c: usize, widths: &[usize]) -> Self {
        let mut cin = in_c;
        let blocks = widths
            .iter()
            .map(|&c| {
                let b = ConvBnBlock {
                    conv: Conv2d::new(rng, cin, c, 4, 2, 1),
                    bn: BatchNorm2d::new(c),
                };
                cin = c;
                b
            })
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, x: &Var, ctx: &Ctx) -> Var {
        self.blocks.iter().fold(x.clone(), |h, b| {
            b.bn.forward(&b.conv.forward(&h), ctx).relu()
        })
    }
}

#[derive(Clone, Debug)]
pub struct PlainDecoder {
    pub blocks: Vec<UpBnBlock>,
}
impl_module!(PlainDecoder { blocks });

impl PlainDecoder {
    /// Mirrors `widths` (deepest last) back to `out_c` channels.
    pub fn new(rng: &mut impl Rng, widths: &[usize], out_c: usize) -> Self {
        let mut blocks = Vec::new();
        for j in (0..widths.len()).rev() {
            let cin = widths[j];
            let last = j == 0;
            let cout = if last { out_c } else { widths[j - 1] };
            blocks.push(UpBnBlock {
                conv: ConvTranspose2d::new(rng, cin, cout, 4, 2, 1),
                bn: (!last).then(|| BatchNorm2d::new(cout)),
            });
        }
        Self { blocks }
    }

    /// Raw output of the final transposed convolution.
    pub fn forward(&self, z: &Var, ctx: &Ctx) -> Var {
        let mut h = z.clone();
        for b in &self.blocks {
            h = b.conv.forward(&h);
            if let Some(bn) = &b.bn {
                h = bn.forward(&h, ctx).relu();
            }
        }
        h
    }
}
