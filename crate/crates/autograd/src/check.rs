//! Finite-difference helpers for verifying analytic gradients.

use crate::tensor::Tensor;

/// Central difference of `f` along coordinate `index` of `x`.
pub fn central_difference(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    index: usize,
    h: f32,
) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[index] += h;
    let mut minus = x.clone();
    minus.data_mut()[index] -= h;
    // use the actual (rounded) step so the quotient is consistent
    let step = (plus.data()[index] as f64) - (minus.data()[index] as f64);
    (f(&plus) - f(&minus)) / step
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    /// Coordinates actually compared (skipped and vanishing ones excluded).
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compares `analytic` against central differences of `f` at the listed
/// coordinates of `x`. Coordinates rejected by `skip`, or where both
/// gradients are below `floor` in magnitude, are not counted.
pub fn compare_gradient(
    analytic: &Tensor,
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    indices: &[usize],
    h: f32,
    floor: f64,
    skip: impl Fn(usize) -> bool,
) -> GradCheck {
    let mut report = GradCheck::default();
    for &i in indices {
        if skip(i) {
            continue;
        }
        let numeric = central_difference(&mut f, x, i, h);
        let a = analytic.data()[i] as f64;
        if a.abs().max(numeric.abs()) < floor {
            continue;
        }
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
    }
    report
}
