//! Relative appearance-flow network: re-renders the first object in the view
//! encoded by the second object's mask, predicting a sampling flow and the
//! synthesized object's foreground from one shared encoder.

use codegan_autograd::{impl_module, no_grad, Adam, Ctx, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::losses::{bce, l1};
use crate::nets::{PlainDecoder, PlainEncoder};
use crate::warp::{bilinear_sample_var, flow_to_grid_var, FlowField};

#[derive(Clone, Debug)]
pub struct RAFNModel {
    pub encoder: PlainEncoder,
    pub flow_decoder: PlainDecoder,
    pub mask_decoder: PlainDecoder,
}
impl_module!(RAFNModel {
    encoder,
    flow_decoder,
    mask_decoder
});

/// Batched network output.
pub struct RafnOutput {
    pub x_synth: Var,
    /// `[N, 2, H, W]`, absolute normalized source coordinates.
    pub flow: Var,
    /// `[N, 1, H, W]` in `(0, 1)`.
    pub fg_prob: Var,
}

impl RAFNModel {
    pub fn new(rng: &mut impl Rng, widths: &[usize]) -> Self {
        Self {
            encoder: PlainEncoder::new(rng, 4, widths),
            flow_decoder: PlainDecoder::new(rng, widths, 2),
            mask_decoder: PlainDecoder::new(rng, widths, 1),
        }
    }

    /// `x_r: [N, 3, H, W]`, `y_mask: [N, 1, H, W]`.
    pub fn forward(
        &self,
        x_r: &Var,
        y_mask: &Var,
        background: f32,
        ctx: &Ctx,
    ) -> Result<RafnOutput> {
        let (xs, ms) = (x_r.shape(), y_mask.shape());
        if xs.len() != 4 || ms.len() != 4 || xs[0] != ms[0] || xs[2..] != ms[2..] || ms[1] != 1 {
            return Err(Error::Shape(format!("rafn inputs {xs:?} and {ms:?}")));
        }
        let z = self.encoder.forward(&Var::concat(&[x_r, y_mask], 1), ctx);
        let flow = self.flow_decoder.forward(&z, ctx).tanh();
        let fg_prob = self.mask_decoder.forward(&z, ctx).sigmoid();
        let x_synth = synthesize(x_r, &flow, background)?;
        Ok(RafnOutput {
            x_synth,
            flow,
            fg_prob,
        })
    }
}

/// Samples `x_r` at the flow's source coordinates.
pub fn synthesize(x_r: &Var, flow: &Var, background: f32) -> Result<Var> {
    bilinear_sample_var(x_r, &flow_to_grid_var(flow), background)
}

/// Single-example evaluation.
pub fn rafn_forward(
    model: &RAFNModel,
    x_r: &Image,
    y_mask: &BinaryMask,
    background: f32,
) -> Result<(Image, FlowField, Vec<f32>)> {
    if x_r.dims() != y_mask.dims() {
        return Err(Error::Shape(format!(
            "rafn image {:?} vs mask {:?}",
            x_r.dims(),
            y_mask.dims()
        )));
    }
    let out = no_grad(|| {
        model.forward(
            &Var::constant(x_r.to_tensor()),
            &Var::constant(y_mask.to_tensor()),
            background,
            &Ctx::eval(),
        )
    })?;
    let flow = out.flow.value().permute(&[0, 2, 3, 1]);
    let (h, w) = x_r.dims();
    Ok((
        Image::from_tensor(out.x_synth.value(), 0)?,
        FlowField::new(h, w, flow.to_vec())?,
        out.fg_prob.value().to_vec(),
    ))
}

/// `L1(x_synth, x_gt) + lambda · BCE(fg_prob, fg_gt)`.
pub fn rafn_loss(
    x_synth: &Var,
    x_gt: &Var,
    fg_prob: &Var,
    fg_gt: &Var,
    lambda: f32,
) -> Result<Var> {
    if x_synth
        .value()
        .data()
        .iter()
        .chain(fg_prob.value().data())
        .any(|v| v.is_nan())
    {
        return Err(Error::NonFinite("rafn loss input"));
    }
    let recon = l1(x_synth, x_gt);
    if lambda == 0.0 {
        return Ok(recon);
    }
    Ok(recon.add(&bce(fg_prob, fg_gt).mul_scalar(lambda)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RafnMetrics {
    pub l1: f32,
    pub bce: f32,
    pub total: f32,
}

pub struct RafnTrainer {
    pub opt: Adam,
    pub mask_weight: f32,
    pub background: f32,
}

impl RafnTrainer {
    pub fn new(opt: Adam, mask_weight: f32, background: f32) -> Self {
        Self {
            opt,
            mask_weight,
            background,
        }
    }

    /// One update on a batch; metrics are taken before the update.
    pub fn step(
        &mut self,
        model: &RAFNModel,
        x_r: &Var,
        y_mask: &Var,
        x_gt: &Var,
        fg_gt: &Var,
        ctx: &Ctx,
    ) -> Result<RafnMetrics> {
        let out = model.forward(x_r, y_mask, self.background, ctx)?;
        let loss = rafn_loss(&out.x_synth, x_gt, &out.fg_prob, fg_gt, self.mask_weight)?;
        let metrics = RafnMetrics {
            l1: no_grad(|| l1(&out.x_synth, x_gt).item()),
            bce: no_grad(|| bce(&out.fg_prob, fg_gt).item()),
            total: loss.item(),
        };
        if !metrics.total.is_finite() {
            return Err(Error::NonFinite("rafn loss"));
        }
        let grads = loss.backward();
        self.opt.step(&[("rafn", model)], &grads);
        Ok(metrics)
    }
}
