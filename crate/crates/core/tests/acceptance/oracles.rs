use codegan_autograd::check::{central_difference, compare_gradient, relative_error};
use codegan_autograd::{grad, no_grad, Ctx, Module, Tensor, Var};
use codegan_core::batch::Batch;
use codegan_core::code::{
    composition_d_term, composition_g_term, decomposition_d_term, decomposition_g_term,
    full_generator_loss, generator_loss_terms, mask_ce_loss, CoDeForward, CoDeModel, LossWeights,
    Pipeline, Targets,
};
use codegan_core::config::{Config, DecTarget};
use codegan_core::image::Image;
use codegan_core::losses::{bce, gan_d_term, gan_g_term, gradient_penalty};
use codegan_core::nets::{Conditioned, Critic};
use codegan_core::rafn::{rafn_loss, RAFNModel};
use codegan_core::warp::{
    bilinear_sample, bilinear_sample_var, warp_affine, AffineParams, SampleGrid,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::support::{
    max_abs_diff, mean_abs_diff, mean_ce, paired_scenes, softplus, to_f64, Check, Outcome, Shared,
};

const BG: f32 = -1.0;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
    Image::new(
        h,
        w,
        c,
        (0..h * w * c)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .expect("valid image")
}

/// Largest deviation of `out` from `expected(i, j, c)` over the pixels the
/// predicate admits, with the number of admitted pixels.
fn compare_pixels(
    out: &Image,
    expected: impl Fn(usize, usize, usize) -> Option<f32>,
) -> (f32, usize) {
    let (mut worst, mut count) = (0.0f32, 0);
    for i in 0..out.height() {
        for j in 0..out.width() {
            for c in 0..out.channels() {
                if let Some(v) = expected(i, j, c) {
                    worst = worst.max((out.get(i, j, c) - v).abs());
                    count += 1;
                }
            }
        }
    }
    (worst, count)
}

pub fn warp_oracles(_: &mut Shared) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (h, w) = (13, 17);
    let img = random_image(&mut rng, h, w, 3);
    let mut parts = Vec::new();

    let pixel_centres = SampleGrid::from_fn(h, w, |i, j| {
        (
            -1.0 + 2.0 * j as f32 / (w - 1) as f32,
            -1.0 + 2.0 * i as f32 / (h - 1) as f32,
        )
    });
    let by_grid = bilinear_sample(&img, &pixel_centres, BG)?;
    let by_affine = warp_affine(&img, &AffineParams::IDENTITY, BG)?;
    let identity =
        max_abs_diff(by_grid.data(), img.data()).max(max_abs_diff(by_affine.data(), img.data()));
    parts.push((identity <= 1e-6, format!("identity max err {identity:.1e}")));

    let mut shift_err = 0.0f32;
    for (dx, dy) in [(1i64, 0i64), (0, 2), (-3, 1), (2, -2), (5, 3), (-4, -5)] {
        let theta = AffineParams::translation(
            2.0 * dx as f32 / (w - 1) as f32,
            2.0 * dy as f32 / (h - 1) as f32,
        );
        let out = warp_affine(&img, &theta, BG)?;
        let (err, count) = compare_pixels(&out, |i, j, c| {
            let (si, sj) = (i as i64 + dy, j as i64 + dx);
            ((0..h as i64).contains(&si) && (0..w as i64).contains(&sj))
                .then(|| img.get(si as usize, sj as usize, c))
        });
        assert!(count > 0);
        shift_err = shift_err.max(err);
    }
    parts.push((
        shift_err <= 1e-5,
        format!("integer shifts max err {shift_err:.1e}"),
    ));

    let mut rot_err = 0.0f32;
    for n in [11, 12] {
        let square = random_image(&mut rng, n, n, 2);
        let quarter = AffineParams::new([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0]])?;
        let out = warp_affine(&square, &quarter, BG)?;
        let (err, _) = compare_pixels(&out, |i, j, c| Some(square.get(j, n - 1 - i, c)));
        rot_err = rot_err.max(err);
    }
    parts.push((
        rot_err <= 1e-5,
        format!("quarter turns max err {rot_err:.1e}"),
    ));

    // corners of f(u, v) = -1 + u/2 + v + uv/2, which bilinear interpolation
    // reproduces exactly; points off the image blend in a background of 0.25
    let tiny = Image::from_fn(2, 2, 1, |r, c, _| [[-1.0, -0.5], [0.0, 1.0]][r][c]);
    let points: [((f32, f32), f32); 8] = [
        ((-1.0, -1.0), -1.0),
        ((1.0, 1.0), 1.0),
        ((0.0, 0.0), -0.125),
        ((-0.5, 0.5), -0.03125),
        ((0.2, -0.6), -0.44),
        ((3.0, 3.0), 0.25),
        ((-2.0, -1.0), -0.375),
        ((1.0, 2.0), 0.625),
    ];
    let grid = SampleGrid::from_fn(1, points.len(), |_, j| points[j].0);
    let out = bilinear_sample(&tiny, &grid, 0.25)?;
    let expected: Vec<f32> = points.iter().map(|p| p.1).collect();
    let point_err = max_abs_diff(out.data(), &expected);
    parts.push((
        point_err <= 1e-6,
        format!(
            "{} hand-computed points max err {point_err:.1e}",
            points.len()
        ),
    ));
    Ok(Outcome::all(parts))
}

/// Reference bilinear sampler in f64: `sum(weights * sample(src, grid))` for
/// one `[C, H, W]` source and an `[Ho, Wo]` grid of interleaved `(x, y)`.
fn reference_sample_loss(
    src: &[f64],
    grid: &[f64],
    weights: &[f64],
    c: usize,
    h: usize,
    w: usize,
) -> f64 {
    let at = |ch: usize, y: i64, x: i64| {
        if (0..h as i64).contains(&y) && (0..w as i64).contains(&x) {
            src[(ch * h + y as usize) * w + x as usize]
        } else {
            BG as f64
        }
    };
    let points = grid.len() / 2;
    let mut total = 0.0;
    for p in 0..points {
        let px = (grid[2 * p] + 1.0) * (w - 1) as f64 / 2.0;
        let py = (grid[2 * p + 1] + 1.0) * (h - 1) as f64 / 2.0;
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        for ch in 0..c {
            let v = (1.0 - fy) * ((1.0 - fx) * at(ch, y0, x0) + fx * at(ch, y0, x0 + 1))
                + fy * ((1.0 - fx) * at(ch, y0 + 1, x0) + fx * at(ch, y0 + 1, x0 + 1));
            total += weights[ch * points + p] * v;
        }
    }
    total
}

fn f64_difference(values: &[f64], i: usize, h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let (mut plus, mut minus) = (values.to_vec(), values.to_vec());
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

struct GradReport {
    checked: usize,
    worst: f64,
}

impl GradReport {
    fn part(&self, what: &str) -> (bool, String) {
        (
            self.checked >= 20 && self.worst <= 1e-2,
            format!(
                "{what} {} coords max rel err {:.1e}",
                self.checked, self.worst
            ),
        )
    }
}

fn bilinear_gradients(rng: &mut ChaCha8Rng) -> (GradReport, GradReport) {
    let (c, h, w, ho, wo) = (2, 7, 9, 6, 5);
    let src: Vec<f32> = (0..c * h * w)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let grid: Vec<f32> = (0..ho * wo * 2)
        .map(|_| rng.random_range(-1.1..1.1))
        .collect();
    let weights: Vec<f32> = (0..c * ho * wo)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let sv = Var::leaf(Tensor::new(&[1, c, h, w], src.clone()));
    let gv = Var::leaf(Tensor::new(&[1, ho, wo, 2], grid.clone()));
    let out = bilinear_sample_var(&sv, &gv, BG)
        .expect("valid shapes")
        .mul(&Var::constant(Tensor::new(
            &[1, c, ho, wo],
            weights.clone(),
        )));
    let grads = grad(&out.sum(), &[&sv, &gv], false);
    let (src, grid, weights) = (to_f64(&src), to_f64(&grid), to_f64(&weights));

    let mut src_idx: Vec<usize> = (0..src.len()).collect();
    src_idx.shuffle(rng);
    let mut src_report = GradReport {
        checked: 0,
        worst: 0.0,
    };
    for &i in src_idx.iter().take(40) {
        let numeric = f64_difference(&src, i, 1e-4, |s| {
            reference_sample_loss(s, &grid, &weights, c, h, w)
        });
        let analytic = grads[0].value().data()[i] as f64;
        if analytic.abs().max(numeric.abs()) < 1e-4 {
            continue;
        }
        src_report.checked += 1;
        src_report.worst = src_report.worst.max(relative_error(analytic, numeric));
    }

    let mut grid_idx: Vec<usize> = (0..grid.len()).collect();
    grid_idx.shuffle(rng);
    let mut grid_report = GradReport {
        checked: 0,
        worst: 0.0,
    };
    for &i in &grid_idx {
        if grid_report.checked == 40 {
            break;
        }
        let extent = if i % 2 == 0 { w } else { h };
        let pixel = (grid[i] + 1.0) * (extent - 1) as f64 / 2.0;
        if (pixel - pixel.round()).abs() < 1e-2 {
            continue;
        }
        let numeric = f64_difference(&grid, i, 1e-5, |g| {
            reference_sample_loss(&src, g, &weights, c, h, w)
        });
        let analytic = grads[1].value().data()[i] as f64;
        if analytic.abs().max(numeric.abs()) < 1e-4 {
            continue;
        }
        grid_report.checked += 1;
        grid_report.worst = grid_report.worst.max(relative_error(analytic, numeric));
    }
    (src_report, grid_report)
}

fn trainable_params(module: &dyn Module, prefix: &str) -> Vec<(String, Var)> {
    let mut params = Vec::new();
    module.for_each_param(prefix, &mut |name, p| {
        if p.trainable() {
            params.push((name.to_string(), p.var()))
        }
    });
    params
}

fn with_param<M: Module + Clone>(model: &M, prefix: &str, name: &str, value: &Tensor) -> M {
    let probe = model.clone();
    probe.for_each_param(prefix, &mut |pn, p| {
        if pn == name {
            p.set(value.clone())
        }
    });
    probe
}

fn rafn_gradients(rng: &mut ChaCha8Rng) -> GradReport {
    let (n, size) = (2, 8);
    let model = RAFNModel::new(rng, &[3]);
    let (a, b, phase): (f32, f32, f32) = (
        rng.random_range(0.1..0.25),
        rng.random_range(0.1..0.25),
        rng.random(),
    );
    let x = Var::constant(Tensor::new(
        &[n, 3, size, size],
        (0..n * 3 * size * size)
            .map(|i| {
                let (k, y, x) = (i / (size * size), (i / size) % size, i % size);
                0.8 * (x as f32 * a + y as f32 * b + k as f32 * 0.7 + phase * 6.0).sin()
            })
            .collect(),
    ));
    let m = Var::constant(Tensor::new(
        &[n, 1, size, size],
        (0..n * size * size)
            .map(|_| rng.random_bool(0.4) as u8 as f32)
            .collect(),
    ));
    // a target outside the synthesized range keeps the L1 term off its kink
    let gt = Var::full(&[n, 3, size, size], 1.0);
    let fg = Var::constant(Tensor::new(
        &[n, 1, size, size],
        (0..n * size * size)
            .map(|i| (i % 3 == 0) as u8 as f32)
            .collect(),
    ));
    let ctx = Ctx::train(0);
    let lambda = 0.5;
    let f64_loss = |probe: &RAFNModel| {
        let out = no_grad(|| probe.forward(&x, &m, BG, &ctx)).expect("valid shapes");
        let l1 = mean_abs_diff(
            &to_f64(out.x_synth.value().data()),
            &to_f64(gt.value().data()),
        );
        let probs = to_f64(out.fg_prob.value().data());
        let targets = to_f64(fg.value().data());
        let bce = probs
            .iter()
            .zip(&targets)
            .map(|(p, t)| {
                let p = p.clamp(1e-7, 1.0 - 1e-7);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / probs.len() as f64;
        l1 + lambda as f64 * bce
    };
    let out = model.forward(&x, &m, BG, &ctx).expect("valid shapes");
    let grads = rafn_loss(&out.x_synth, &gt, &out.fg_prob, &fg, lambda)
        .expect("valid shapes")
        .backward();
    let cells = |probe: &RAFNModel| -> Vec<i64> {
        let out = no_grad(|| probe.forward(&x, &m, BG, &ctx)).expect("valid shapes");
        out.flow
            .value()
            .data()
            .iter()
            .map(|f| ((f + 1.0) * (size as f32 - 1.0) / 2.0).floor() as i64)
            .collect()
    };
    let h = 1e-3;
    let mut report = GradReport {
        checked: 0,
        worst: 0.0,
    };
    for (name, var) in trainable_params(&model, "") {
        let analytic = grads
            .get(&var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()));
        let live: Vec<usize> = (0..analytic.numel())
            .filter(|&i| analytic.data()[i].abs() > 1e-3)
            .collect();
        if live.is_empty() {
            continue;
        }
        let picks: Vec<usize> = (0..6)
            .map(|_| live[rng.random_range(0..live.len())])
            .collect();
        // a perturbation that moves any sample point into another pixel cell
        // straddles an integral coordinate
        let crosses = |i: usize| {
            let shifted = |d: f32| {
                let mut t = var.value().clone();
                t.data_mut()[i] += d;
                cells(&with_param(&model, "", &name, &t))
            };
            shifted(h) != shifted(-h)
        };
        let r = compare_gradient(
            &analytic,
            |t| f64_loss(&with_param(&model, "", &name, t)),
            var.value(),
            &picks,
            h,
            1e-4,
            crosses,
        );
        report.checked += r.checked;
        report.worst = report.worst.max(r.max_rel_err);
    }
    report
}

fn conditioned_logits(critic: &dyn Critic, condition: Var, input: &Var) -> Vec<f64> {
    to_f64(
        Conditioned { critic, condition }
            .logits(input)
            .value()
            .data(),
    )
}

fn mean_softplus_neg(logits: &[f64]) -> f64 {
    logits.iter().map(|&z| softplus(-z)).sum::<f64>() / logits.len() as f64
}

/// Generator objective of a bare CoDe model with unit weights, recomputed in
/// f64 from the network outputs.
fn code_objective(model: &CoDeModel, x_t: &Var, y_t: &Var, t: &Targets) -> f64 {
    let mut ctx = Ctx::train(11);
    let c_hat = model.compose_var(x_t, y_t, &mut ctx);
    let d = model.decompose_var(&c_hat, &mut ctx);
    let v = |var: &Var| to_f64(var.value().data());
    let l1_comp = mean_abs_diff(&v(&c_hat), &v(&t.c));
    let l1_dec =
        (mean_abs_diff(&v(&d.x_hat), &v(&t.x_c)) + mean_abs_diff(&v(&d.y_hat), &v(&t.y_c))) / 2.0;
    let ce = mean_ce(&v(&d.probs), d.probs.shape(), &t.labels);
    let comp = conditioned_logits(&model.d_comp, Var::concat(&[x_t, y_t], 1), &c_hat);
    let dec = conditioned_logits(
        &model.d_dec,
        Var::concat(&[&c_hat, &c_hat], 0),
        &Var::concat(&[&d.x_hat, &d.y_hat], 0),
    );
    l1_comp + l1_dec + ce + mean_softplus_neg(&comp) + mean_softplus_neg(&dec)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-0.9..0.9)).collect())
}

fn code_gradients(rng: &mut ChaCha8Rng) -> GradReport {
    let model = CoDeModel::new(rng, 2, 3, 2);
    let (n, size) = (2, 16);
    let x_t = Var::constant(random_tensor(rng, &[n, 3, size, size]));
    let y_t = Var::constant(random_tensor(rng, &[n, 3, size, size]));
    // targets outside the tanh range keep every L1 term off its kink
    let beyond = Var::constant(Tensor::full(&[n, 3, size, size], 1.5));
    let t = Targets {
        c: beyond.clone(),
        labels: (0..n * size * size)
            .map(|_| rng.random_range(0..3u8))
            .collect(),
        x_c: beyond.clone(),
        y_c: beyond.neg(),
    };
    let unit = LossWeights {
        lambda1: 1.0,
        lambda2: 1.0,
        lambda3: 1.0,
    };
    let mut ctx = Ctx::train(11);
    let c_hat = model.compose_var(&x_t, &y_t, &mut ctx);
    let d = model.decompose_var(&c_hat, &mut ctx);
    let f = CoDeForward {
        x_t: x_t.clone(),
        y_t: y_t.clone(),
        c_hat,
        x_hat: d.x_hat,
        y_hat: d.y_hat,
        probs: d.probs,
    };
    let (loss, _) = generator_loss_terms(
        &model.d_comp,
        &model.d_dec,
        &f,
        &t,
        unit,
        DecTarget::GroundTruth,
    );
    let grads = loss.backward();

    let mut params = Vec::new();
    for (group, m) in model.generator_groups() {
        params.extend(trainable_params(m, group));
    }
    let probe = |name: &str, value: &Tensor| {
        let p = model.clone();
        for (group, m) in p.generator_groups() {
            m.for_each_param(group, &mut |pn, param| {
                if pn == name {
                    param.set(value.clone())
                }
            });
        }
        p
    };
    let h = 3e-4;
    let mut report = GradReport {
        checked: 0,
        worst: 0.0,
    };
    for (name, var) in &params {
        let Some(analytic) = grads.get(var) else {
            continue;
        };
        let top = analytic.data().iter().fold(0.0f32, |a, g| a.max(g.abs()));
        let live: Vec<usize> = (0..analytic.numel())
            .filter(|&i| analytic.data()[i].abs() > 0.05 * top)
            .collect();
        if live.is_empty() {
            continue;
        }
        let picks: Vec<usize> = (0..3)
            .map(|_| live[rng.random_range(0..live.len())])
            .collect();
        let objective = |v: &Tensor| no_grad(|| code_objective(&probe(name, v), &x_t, &y_t, &t));
        // a difference quotient that moves with the step size sits next to a
        // rectifier kink
        let kinked = |i: usize| {
            let a = central_difference(objective, var.value(), i, h);
            let b = central_difference(objective, var.value(), i, h / 2.0);
            relative_error(a, b) > 2e-3
        };
        let r = compare_gradient(analytic, objective, var.value(), &picks, h, 1e-3, kinked);
        report.checked += r.checked;
        report.worst = report.worst.max(r.max_rel_err);
    }
    report
}

pub fn gradient_checks(_: &mut Shared) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let (src, grid) = bilinear_gradients(&mut rng);
    let rafn = rafn_gradients(&mut rng);
    let code = code_gradients(&mut rng);
    Ok(Outcome::all(vec![
        src.part("bilinear source"),
        grid.part("bilinear grid"),
        rafn.part("micro view network"),
        code.part("micro CoDe"),
    ]))
}

/// A critic at `D = 0.5` everywhere.
struct Undecided;

impl Critic for Undecided {
    fn logits(&self, input: &Var) -> Var {
        input.mul_scalar(0.0).sum_axes(&[1, 2, 3])
    }
}

/// `sum(w ⊙ x)` per sample.
struct Linear(Var);

impl Critic for Linear {
    fn logits(&self, input: &Var) -> Var {
        input.mul(&self.0).sum_axes(&[1, 2, 3])
    }
}

fn scaled_linear(rng: &mut ChaCha8Rng, n: usize, shape: [usize; 3], norm: f32) -> Linear {
    let per: usize = shape.iter().product();
    let w: Vec<f32> = (0..per).map(|_| rng.random_range(-1.0..1.0)).collect();
    let len = w.iter().map(|v| v * v).sum::<f32>().sqrt();
    let w: Vec<f32> = w.iter().map(|v| v / len * norm).collect();
    let tiled: Vec<f32> = (0..n).flat_map(|_| w.iter().copied()).collect();
    Linear(Var::constant(Tensor::new(
        &[n, shape[0], shape[1], shape[2]],
        tiled,
    )))
}

fn close(name: &str, got: f32, want: f64, tol: f64) -> (bool, String) {
    let err = (got as f64 - want).abs();
    (
        err <= tol,
        format!("{name} {got:.6} vs {want:.6} (err {err:.1e})"),
    )
}

fn oracle_config() -> Config {
    Config {
        image_size: 16,
        gen_filters: 2,
        gen_depth: 3,
        disc_filters: 2,
        stn_channels: vec![2],
        stn_hidden: 4,
        ..Config::default()
    }
}

pub fn loss_closed_forms(_: &mut Shared) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let (ln2, ln3) = (std::f64::consts::LN_2, 3f64.ln());
    let mut parts = Vec::new();

    let uniform = Var::full(&[2, 3, 4, 5], 1.0 / 3.0);
    let labels: Vec<u8> = (0..2 * 4 * 5).map(|_| rng.random_range(0..3u8)).collect();
    parts.push(close(
        "mask CE at uniform",
        mask_ce_loss(&uniform, &labels).item(),
        ln3,
        1e-5,
    ));

    let half = Var::full(&[2, 1, 4, 5], 0.5);
    let targets = Var::constant(Tensor::new(
        &[2, 1, 4, 5],
        (0..40).map(|_| rng.random_bool(0.5) as u8 as f32).collect(),
    ));
    parts.push(close("BCE at 0.5", bce(&half, &targets).item(), ln2, 1e-5));

    // logits of +-60 push the other side's contribution below 1e-26
    let zero = Var::full(&[3, 1, 2, 2], 0.0);
    let sure = Var::full(&[3, 1, 2, 2], 60.0);
    parts.push(close("generator side", gan_g_term(&zero).item(), ln2, 1e-5));
    parts.push(close(
        "real side",
        2.0 * gan_d_term(&zero, &sure.neg()).item(),
        ln2,
        1e-5,
    ));
    parts.push(close(
        "fake side",
        2.0 * gan_d_term(&sure, &zero).item(),
        ln2,
        1e-5,
    ));
    let img = |rng: &mut ChaCha8Rng| Var::constant(random_tensor(rng, &[2, 3, 8, 8]));
    let (x_t, y_t, c, c_hat, x_hat, y_hat) = (
        img(&mut rng),
        img(&mut rng),
        img(&mut rng),
        img(&mut rng),
        img(&mut rng),
        img(&mut rng),
    );
    parts.push(close(
        "composition generator term",
        composition_g_term(&Undecided, &x_t, &y_t, &c_hat).item(),
        ln2,
        1e-5,
    ));
    parts.push(close(
        "decomposition generator term",
        decomposition_g_term(&Undecided, &c_hat, &x_hat, &y_hat).item(),
        ln2,
        1e-5,
    ));
    let (d_comp, _) = composition_d_term(&Undecided, &x_t, &y_t, &c, &c_hat, 0.0, &mut rng);
    parts.push(close("composition critic term", d_comp.item(), ln2, 1e-5));
    let (d_dec, _) = decomposition_d_term(
        &Undecided, &c_hat, &x_t, &y_t, &x_hat, &y_hat, 0.0, &mut rng,
    );
    parts.push(close("decomposition critic term", d_dec.item(), ln2, 1e-5));

    let (real, fake) = (img(&mut rng), img(&mut rng));
    let eps = Tensor::new(&[2, 1, 1, 1], vec![0.3, 0.8]);
    let unit = scaled_linear(&mut rng, 2, [3, 8, 8], 1.0);
    parts.push(close(
        "penalty at unit-norm linear critic",
        gradient_penalty(&unit, &real, &fake, &eps).item(),
        0.0,
        1e-6,
    ));
    let steep = scaled_linear(&mut rng, 2, [3, 8, 8], 3.0);
    parts.push(close(
        "penalty at norm-3 linear critic",
        gradient_penalty(&steep, &real, &fake, &eps).item(),
        4.0,
        1e-4,
    ));

    parts.push(full_objective_oracle(&mut rng)?);
    Ok(Outcome::all(parts))
}

/// The weighted end-to-end generator objective against a scalar recomputation
/// from the forward outputs.
fn full_objective_oracle(
    rng: &mut ChaCha8Rng,
) -> Result<(bool, String), Box<dyn std::error::Error>> {
    let cfg = oracle_config();
    let weights = LossWeights::default();
    let stated = [
        weights.lambda1,
        weights.lambda2,
        weights.lambda3,
        cfg.lambda1,
        cfg.lambda2,
        cfg.lambda3,
        cfg.esmr_lambda,
    ];
    if stated != [100.0, 50.0, 1.0, 100.0, 50.0, 1.0, 100.0] {
        return Ok((false, format!("default weights {stated:?}")));
    }
    let pipeline = Pipeline::new(rng, &cfg);
    let scenes = paired_scenes(&cfg, 2, 9)?;
    let batch = Batch::from_scenes(&scenes.iter().collect::<Vec<_>>())?;
    let bg = cfg.background_value;
    let (loss, _) = full_generator_loss(
        &pipeline,
        &batch,
        weights,
        DecTarget::Inputs,
        bg,
        &mut Ctx::train(5),
    )?;
    let f = no_grad(|| pipeline.forward(&batch, bg, &mut Ctx::train(5)))?;

    let v = |var: &Var| to_f64(var.value().data());
    let t = |t: &Tensor| to_f64(t.data());
    let l1_comp = mean_abs_diff(&v(&f.c_hat), &t(&batch.c));
    let l1_dec =
        (mean_abs_diff(&v(&f.x_hat), &v(&f.x_t)) + mean_abs_diff(&v(&f.y_hat), &v(&f.y_t))) / 2.0;
    let l1_stn = (mean_abs_diff(&v(&f.x_t), &t(&batch.x_c))
        + mean_abs_diff(&v(&f.y_t), &t(&batch.y_c)))
        / 2.0;
    let ce = mean_ce(&v(&f.probs), f.probs.shape(), &batch.labels);
    let code = &pipeline.code;
    let comp = conditioned_logits(&code.d_comp, Var::concat(&[&f.x_t, &f.y_t], 1), &f.c_hat);
    let dec = conditioned_logits(
        &code.d_dec,
        Var::concat(&[&f.c_hat, &f.c_hat], 0),
        &Var::concat(&[&f.x_hat, &f.y_hat], 0),
    );
    let oracle = 100.0 * (l1_comp + l1_dec + l1_stn)
        + 50.0 * ce
        + 1.0 * (mean_softplus_neg(&comp) + mean_softplus_neg(&dec));
    let rel = relative_error(loss.item() as f64, oracle);

    let off = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
    };
    let (zero, _) = full_generator_loss(
        &pipeline,
        &batch,
        off,
        DecTarget::Inputs,
        bg,
        &mut Ctx::train(5),
    )?;
    Ok((
        rel <= 1e-4 && zero.item() == 0.0,
        format!("weighted objective {:.5} vs oracle {oracle:.5} (rel err {rel:.1e}), zero weights give {}", loss.item(), zero.item()),
    ))
}
