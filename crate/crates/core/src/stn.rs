//! Relative spatial transformer: one localization network sees both objects
//! and places each with its own affine.

use codegan_autograd::{impl_module, no_grad, Adam, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::l1;
use crate::nets::Localizer;
use crate::warp::{affine_grid_var, bilinear_sample_var, AffineParams};

#[derive(Clone, Debug)]
pub struct RelativeSTN {
    pub localizer: Localizer,
}
impl_module!(RelativeSTN { localizer });

/// Batched transformer output.
pub struct StnOutput {
    pub x_t: Var,
    pub y_t: Var,
    /// `[N, 2, 2, 3]`: the first object's affine, then the second's.
    pub thetas: Var,
}

impl RelativeSTN {
    /// Both affines start at the identity.
    pub fn new(rng: &mut impl Rng, size: usize, channels: &[usize], hidden: usize) -> Self {
        Self {
            localizer: Localizer::new(rng, size, channels, hidden),
        }
    }

    /// `x`, `y`: `[N, 3, H, W]`.
    pub fn forward(&self, x: &Var, y: &Var, background: f32) -> Result<StnOutput> {
        if x.shape() != y.shape() || x.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "stn inputs {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let thetas = self.localizer.forward(&Var::concat(&[x, y], 1));
        let place = |src: &Var, k: usize| {
            let theta = thetas.narrow(1, k, 1).reshape(&[n, 2, 3]);
            bilinear_sample_var(src, &affine_grid_var(&theta, h, w), background)
        };
        Ok(StnOutput {
            x_t: place(x, 0)?,
            y_t: place(y, 1)?,
            thetas,
        })
    }
}

/// Single-pair evaluation returning the placed objects and both affines.
pub fn stn_forward(
    model: &RelativeSTN,
    x: &Image,
    y: &Image,
    background: f32,
) -> Result<(Image, Image, AffineParams, AffineParams)> {
    if x.dims() != y.dims() || x.channels() != y.channels() {
        return Err(Error::Shape(format!(
            "stn inputs {:?} and {:?}",
            x.dims(),
            y.dims()
        )));
    }
    let out = no_grad(|| {
        model.forward(
            &Var::constant(x.to_tensor()),
            &Var::constant(y.to_tensor()),
            background,
        )
    })?;
    let t = out.thetas.value().data();
    Ok((
        Image::from_tensor(out.x_t.value(), 0)?,
        Image::from_tensor(out.y_t.value(), 0)?,
        AffineParams::from_slice(&t[0..6])?,
        AffineParams::from_slice(&t[6..12])?,
    ))
}

/// Mean absolute error of both placed objects against their targets.
pub fn stn_l1_loss(x_t: &Var, y_t: &Var, x_c: &Var, y_c: &Var) -> Var {
    l1(x_t, x_c).add(&l1(y_t, y_c)).mul_scalar(0.5)
}

/// Standalone transformer training on (input pair, placed target pair) batches.
pub struct StnTrainer {
    pub opt: Adam,
    pub background: f32,
}

impl StnTrainer {
    pub fn new(lr: f32, beta1: f32, beta2: f32, background: f32) -> Self {
        Self {
            opt: Adam::new(lr, beta1, beta2),
            background,
        }
    }

    /// One update; returns the loss before the update.
    pub fn step(
        &mut self,
        model: &RelativeSTN,
        x: &Var,
        y: &Var,
        x_c: &Var,
        y_c: &Var,
    ) -> Result<f32> {
        let out = model.forward(x, y, self.background)?;
        let loss = stn_l1_loss(&out.x_t, &out.y_t, x_c, y_c);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite("stn loss"));
        }
        let grads = loss.backward();
        self.opt.step(&[("stn", model)], &grads);
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use codegan_autograd::check::compare_gradient;
    use codegan_autograd::{Module, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn smooth_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
        let (a, b, p): (f32, f32, f32) = (
            rng.random_range(0.1..0.4),
            rng.random_range(0.1..0.4),
            rng.random(),
        );
        Image::from_fn(size, size, 3, |y, x, c| {
            0.8 * ((x as f32 * a + y as f32 * b + c as f32 + p * 6.0).sin())
        })
    }

    #[test]
    fn fresh_model_is_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stn = RelativeSTN::new(&mut rng, 32, &[4, 8, 8], 16);
        let x = smooth_image(&mut rng, 32);
        let y = smooth_image(&mut rng, 32);
        let (xt, yt, t1, t2) = stn_forward(&stn, &x, &y, -1.0).unwrap();
        assert!(xt.max_abs_diff(&x) <= 1e-6);
        assert!(yt.max_abs_diff(&y) <= 1e-6);
        assert_eq!(t1, AffineParams::IDENTITY);
        assert_eq!(t2, AffineParams::IDENTITY);
    }

    #[test]
    fn hand_set_shift_matches_index_shift() {
        let size = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stn = RelativeSTN::new(&mut rng, size, &[4], 8);
        let shift = 16;
        let mut bias = stn.localizer.fc2.bias.value();
        bias.data_mut()[2] = shift as f32 * 2.0 / (size as f32 - 1.0);
        stn.localizer.fc2.bias.set(bias);
        let x = smooth_image(&mut rng, size);
        let y = smooth_image(&mut rng, size);
        let (xt, yt, _, _) = stn_forward(&stn, &x, &y, -1.0).unwrap();
        for c in 0..3 {
            for i in 0..size {
                for j in 0..size {
                    let expected = if j + shift < size {
                        x.get(i, j + shift, c)
                    } else {
                        -1.0
                    };
                    assert!((xt.get(i, j, c) - expected).abs() <= 1e-5, "({i},{j},{c})");
                }
            }
        }
        assert!(yt.max_abs_diff(&y) <= 1e-6);
    }

    #[test]
    fn batch_of_identical_pairs_gives_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stn = RelativeSTN::new(&mut rng, 16, &[4], 8);
        let x = smooth_image(&mut rng, 16);
        let xs = Var::constant(crate::image::stack(&[&x, &x]).unwrap());
        let out = no_grad(|| stn.forward(&xs, &xs, -1.0)).unwrap();
        let v = out.x_t.value();
        assert_eq!(v.narrow(0, 0, 1).data(), v.narrow(0, 1, 1).data());
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stn = RelativeSTN::new(&mut rng, 16, &[4], 8);
        let a = Image::filled(16, 16, 3, 0.0);
        let b = Image::filled(8, 8, 3, 0.0);
        assert!(matches!(
            stn_forward(&stn, &a, &b, -1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn l1_loss_closed_forms() {
        let a = Var::from_vec(&[1, 1, 2, 2], vec![0.1, -0.3, 0.7, 0.2]);
        let b = Var::from_vec(&[1, 1, 2, 2], vec![0.0, 0.4, -0.5, 0.9]);
        assert_eq!(stn_l1_loss(&a, &b, &a, &b).item(), 0.0);
        assert!((stn_l1_loss(&a.add_scalar(0.5), &b, &a, &b).item() - 0.25).abs() < 1e-6);

        let xt = [0.3f64, -0.8, 0.25, 0.6];
        let yt = [-0.1f64, 0.45, 0.9, -0.7];
        let xc = [0.2f64, 0.1, -0.6, 0.6];
        let yc = [0.5f64, 0.5, -0.2, 0.3];
        let mut sum = 0.0;
        for i in 0..4 {
            sum += (xt[i] - xc[i]).abs() + (yt[i] - yc[i]).abs();
        }
        let expected = sum / 8.0;
        let v = |d: &[f64; 4]| Var::from_vec(&[1, 1, 2, 2], d.iter().map(|&x| x as f32).collect());
        let got = stn_l1_loss(&v(&xt), &v(&yt), &v(&xc), &v(&yc)).item() as f64;
        assert!((got - expected).abs() < 1e-6);
    }

    #[test]
    fn loss_gradient_reaches_localization_weights() {
        let size = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stn = RelativeSTN::new(&mut rng, size, &[3], 6);
        // break the zero initialization so every layer receives gradient
        let w = Tensor::new(
            &[12, 6],
            (0..72).map(|_| rng.random_range(-0.05..0.05)).collect(),
        );
        stn.localizer.fc2.weight.set(w);
        // a generic affine keeps sample points away from pixel centers
        stn.localizer.fc2.bias.set(Tensor::new(
            &[12],
            vec![
                0.93, 0.06, 0.031, -0.05, 0.91, -0.027, 0.88, -0.04, -0.019, 0.07, 0.95, 0.043,
            ],
        ));
        let x = Var::constant(smooth_image(&mut rng, size).to_tensor());
        let y = Var::constant(smooth_image(&mut rng, size).to_tensor());
        let xc = Var::constant(smooth_image(&mut rng, size).to_tensor());
        let yc = Var::constant(smooth_image(&mut rng, size).to_tensor());

        let mut checked = 0;
        let mut worst = 0.0f64;
        let mut params = Vec::new();
        stn.for_each_param("", &mut |name, p| params.push((name.to_string(), p.var())));
        let out = stn.forward(&x, &y, -1.0).unwrap();
        let loss = stn_l1_loss(&out.x_t, &out.y_t, &xc, &yc);
        let grads = loss.backward();
        for (name, var) in &params {
            let analytic = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(var.shape()));
            assert!(
                analytic.data().iter().any(|g| *g != 0.0),
                "{name} has no gradient"
            );
            let live: Vec<usize> = (0..analytic.numel())
                .filter(|&i| analytic.data()[i].abs() > 1e-3)
                .collect();
            let picks: Vec<usize> = (0..6)
                .filter(|_| !live.is_empty())
                .map(|_| live[rng.random_range(0..live.len())])
                .collect();
            // the affine head moves sample points fastest, so it gets a smaller step
            let h = if name.starts_with("localizer.fc2") {
                3e-4
            } else {
                1e-3
            };
            let report = compare_gradient(
                &analytic,
                |t| {
                    let probe = stn.clone();
                    probe.for_each_param("", &mut |pn, p| {
                        if pn == name {
                            p.set(t.clone())
                        }
                    });
                    let out = no_grad(|| probe.forward(&x, &y, -1.0)).unwrap();
                    let l1 = |a: &Var, b: &Var| {
                        let (a, b) = (a.value().data(), b.value().data());
                        a.iter()
                            .zip(b)
                            .map(|(p, q)| (*p as f64 - *q as f64).abs())
                            .sum::<f64>()
                            / a.len() as f64
                    };
                    0.5 * (l1(&out.x_t, &xc) + l1(&out.y_t, &yc))
                },
                var.value(),
                &picks,
                h,
                1e-4,
                |_| false,
            );
            checked += report.checked;
            worst = worst.max(report.max_rel_err);
        }
        assert!(checked >= 20, "only {checked} coordinates compared");
        assert!(worst <= 1e-2, "max relative error {worst}");
    }
}
