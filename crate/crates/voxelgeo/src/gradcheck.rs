//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the forward path, so it stays an independent
//! oracle for every analytic backward implementation in the crate.

use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;

/// Default perturbation step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a gradient check over a set of coordinates.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floor that guards the noise level of central
/// differences on O(1) losses (f64 rounding over two evaluations divided
/// by 2h lands around 1e-10).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Numeric d(loss)/d(x[index]) by central differences.
pub fn central_difference(
    x: &Tensor,
    index: usize,
    step: f64,
    mut loss: impl FnMut(&Tensor) -> f64,
) -> f64 {
    let mut probe = x.clone();
    let original = probe.data()[index];
    probe.data_mut()[index] = original + step;
    let plus = loss(&probe);
    probe.data_mut()[index] = original - step;
    let minus = loss(&probe);
    (plus - minus) / (2.0 * step)
}

/// Compare an analytic gradient against central differences on up to
/// `max_coords` coordinates (all of them when the tensor is small, a random
/// sample otherwise).
pub fn check_gradient(
    x: &Tensor,
    analytic: &[f64],
    step: f64,
    max_coords: usize,
    rng: &mut impl Rng,
    mut loss: impl FnMut(&Tensor) -> f64,
) -> GradCheckReport {
    assert_eq!(analytic.len(), x.len(), "gradient length mismatch");
    let coords: Vec<usize> = if x.len() <= max_coords {
        (0..x.len()).collect()
    } else {
        sample(rng, x.len(), max_coords).into_vec()
    };
    let mut max_rel_err: f64 = 0.0;
    for &i in &coords {
        let numeric = central_difference(x, i, step, &mut loss);
        max_rel_err = max_rel_err.max(relative_error(analytic[i], numeric));
    }
    GradCheckReport {
        max_rel_err,
        checked: coords.len(),
    }
}
