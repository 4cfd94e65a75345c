//! Central finite-difference verification of reverse-mode gradients (64-bit).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Index path of the worst coordinate (row-major unravelled for tensors,
    /// a single flat index otherwise).
    pub worst_coordinate: Vec<usize>,
    pub passed: bool,
    pub coordinates_checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Finite-difference half step.
    pub step: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self { tolerance, step: 1e-5, floor: 1e-6 }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks a scalar function built on a tape from a single input leaf.
pub fn check_gradients<F>(function: F, point: &Tensor<f64>, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'static, f64>, Var) -> Var,
{
    let rows = point.rows();
    let cols = point.cols();
    let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::detached();
        let input = tape.leaf(rows, cols, x.to_vec());
        let out = function(&mut tape, input);
        if tape.shape(out) != (1, 1) {
            return Err(Error::Shape("gradient check needs a scalar function".into()));
        }
        let value = tape.scalar(out);
        let grads = tape.backward_scalar(out);
        let g = grads.wrt(input).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
        Ok((value, g))
    };
    let coords: Vec<usize> = (0..point.len()).collect();
    let mut report = check_with(eval, point.data(), &coords, GradCheckOptions::with_tolerance(tolerance))?;
    report.worst_coordinate = unravel(report.worst_coordinate[0], point.shape());
    Ok(report)
}

/// Checks `f`, which returns `(value, analytic gradient)`, on the listed
/// coordinates of `point`.
pub fn check_with<F>(f: F, point: &[f64], coords: &[usize], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("function value {value} at the check point")));
    }
    if analytic.len() != point.len() {
        return Err(Error::Shape(format!(
            "gradient of length {} for point of length {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = (0.0f64, coords.first().copied().unwrap_or(0));
    for &i in coords {
        let orig = x[i];
        x[i] = orig + opts.step;
        let (plus, _) = f(&x)?;
        x[i] = orig - opts.step;
        let (minus, _) = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("function value near coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * opts.step);
        let err = relative_error(analytic[i], numeric, opts.floor);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_coordinate: vec![worst.1],
        passed: worst.0 < opts.tolerance,
        coordinates_checked: coords.len(),
    })
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut path = vec![0; shape.len()];
    for (slot, extent) in path.iter_mut().zip(shape).rev() {
        *slot = flat % extent;
        flat /= extent;
    }
    path
}
