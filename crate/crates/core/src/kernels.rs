//! Row-wise numeric kernels shared by the tape and by plain evaluation.
//!
//! Every kernel reduces over the last axis. Inputs are flat row-major slices
//! with an explicit column count. Forward and backward halves live side by
//! side so the tape can reuse them.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Epsilon used inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Dot product with eight independent accumulators so the loop vectorizes.
/// The summation order is fixed, so results are deterministic.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (*s - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

pub fn softmax_rows_backward<T: Real>(y: &[T], dy: &[T], cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: T = yr.iter().zip(dyr).map(|(a, b)| *a * *b).sum();
        for ((d, a), b) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = *a * (*b - dot);
        }
    }
    dx
}

/// Returns `(y, xhat, rstd)`; `xhat` and `rstd` are kept for the backward pass.
pub fn layer_norm_rows<T: Real>(x: &[T], gain: &[T], bias: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cols = gain.len();
    let n = T::of(cols as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let rows = x.len() / cols;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        rstd.push(inv);
        for c in 0..cols {
            let h = (src[c] - mean) * inv;
            xhat[r * cols + c] = h;
            y[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_rows_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cols = gain.len();
    let n = T::of(cols as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dg = vec![T::zero(); cols];
    let mut db = vec![T::zero(); cols];
    for (r, inv) in rstd.iter().enumerate() {
        let off = r * cols;
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for c in 0..cols {
            let d = dy[off + c] * gain[c];
            mean_d = mean_d + d;
            mean_dx = mean_dx + d * xhat[off + c];
            dg[c] = dg[c] + dy[off + c] * xhat[off + c];
            db[c] = db[c] + dy[off + c];
        }
        mean_d = mean_d / n;
        mean_dx = mean_dx / n;
        for c in 0..cols {
            let d = dy[off + c] * gain[c];
            dx[off + c] = *inv * (d - mean_d - xhat[off + c] * mean_dx);
        }
    }
    (dx, dg, db)
}

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
///
/// Agrees with the exact `x * Phi(x)` form to within 1e-3 everywhere.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let u = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_CUBIC) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let k = T::of(SQRT_2_OVER_PI);
    let c = T::of(GELU_CUBIC);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::of(3.0) * c * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

pub fn l2_norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|x| *x * *x).sum::<T>().sqrt()
}

fn check_finite<T: Real>(what: &str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}: element {i} is {}", data[i]))),
        None => Ok(()),
    }
}

/// Softmax over the last axis, stabilized by max-subtraction.
pub fn softmax<T: Real>(v: &Tensor<T>) -> Result<Tensor<T>> {
    check_finite("softmax input", v.data())?;
    Tensor::new(v.shape().to_vec(), softmax_rows(v.data(), v.cols()))
}

pub fn layer_norm<T: Real>(v: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = v.cols();
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::Shape(format!(
            "layer_norm over {cols} columns given gain {} and bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let (y, _, _) = layer_norm_rows(v.data(), gain.data(), bias.data());
    Tensor::new(v.shape().to_vec(), y)
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|v| gelu_scalar(*v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    let dot: T = a.iter().zip(b).map(|(x, y)| *x * *y).sum();
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

/// L2-normalizes `v`; zero vectors are rejected.
pub fn normalize<T: Real>(v: &[T]) -> Result<Vec<T>> {
    let n = l2_norm(v);
    if n == T::zero() || !n.is_finite() {
        return Err(Error::InvalidArgument("cannot normalize a zero or non-finite vector".into()));
    }
    Ok(v.iter().map(|x| *x / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::function::erf::erf;

    fn exact_gelu(x: f64) -> f64 {
        x * 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
    }

    #[test]
    fn softmax_uniform_and_hand_evaluated() {
        let u = softmax(&Tensor::vector(vec![0.0f64; 4])).unwrap();
        assert_eq!(u.data(), &[0.25; 4]);
        let v = softmax(&Tensor::vector(vec![4f64.ln(), 0.0, 0.0, 0.0])).unwrap();
        let expected = [4.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0];
        for (a, b) in v.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&Tensor::vector(vec![0.0f32, f32::NAN])).is_err());
        assert!(softmax(&Tensor::vector(vec![f32::INFINITY, 0.0])).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::vector(vec![1.0f64; 3]);
        let zero = Tensor::vector(vec![0.0f64; 3]);
        let c = layer_norm(&Tensor::vector(vec![5.0f64; 3]), &one, &zero).unwrap();
        assert!(c.data().iter().all(|v| *v == 0.0));

        let g = Tensor::vector(vec![1.0f64; 2]);
        let b = Tensor::vector(vec![0.0f64; 2]);
        let y = layer_norm(&Tensor::vector(vec![1.0f64, -1.0]), &g, &b).unwrap();
        let scale = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - scale).abs() < 1e-12);
        assert!((y.data()[1] + scale).abs() < 1e-12);

        let bias = Tensor::vector(vec![0.7f64; 3]);
        let z = layer_norm(&Tensor::vector(vec![3.0f64, -2.0, 9.0]), &zero, &bias).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.7));
    }

    #[test]
    fn layer_norm_shape_mismatch() {
        let g = Tensor::vector(vec![1.0f32; 2]);
        assert!(layer_norm(&Tensor::vector(vec![1.0f32; 3]), &g, &g).is_err());
    }

    #[test]
    fn gelu_examples_against_exact_form() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(30.0f64) - 30.0).abs() < 1e-9);
        assert!((gelu_scalar(1.0f64) - exact_gelu(1.0)).abs() < 1e-3);
        let mut x = -8.0;
        while x <= 8.0 {
            assert!((gelu_scalar(x) - exact_gelu(x)).abs() < 1e-3, "x={x}");
            x += 0.01;
        }
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3f64, -1.2, 2.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0f64, 0.0], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-50.0f32..50.0, 1..40)) {
            let s = softmax(&Tensor::vector(v)).unwrap();
            let total: f64 = s.data().iter().map(|x| *x as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(s.data().iter().all(|x| *x >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(v in proptest::collection::vec(-20.0f64..20.0, 1..16), c in -100.0f64..100.0) {
            let a = softmax(&Tensor::vector(v.clone())).unwrap();
            let b = softmax(&Tensor::vector(v.iter().map(|x| x + c).collect())).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }

        #[test]
        fn cosine_bounded(a in proptest::collection::vec(-5.0f64..5.0, 3), b in proptest::collection::vec(-5.0f64..5.0, 3)) {
            if let Ok(c) = cosine_similarity(&a, &b) {
                prop_assert!((-1.0..=1.0).contains(&c));
            }
        }
    }
}
