//! Central finite-difference oracle for checking reverse-mode gradients.
//!
//! The oracle only ever evaluates the forward function, in `f64`, so it stays
//! independent of every backward rule it is used to check. For `f32` checks
//! the inputs are first rounded to `f32`, the analytic gradient is taken on an
//! `f32` tape, and the finite differences are taken in `f64` at the rounded
//! point.

use crate::error::Result;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Step used by the gradient suites.
pub const DEFAULT_EPS: f64 = 1e-3;

/// Relative error `|a - n| / (|a| + |n|)` in the 2-norm; zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic) + norm(numeric);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Central differences of a scalar function of several tensors with respect to input `which`.
///
/// Uses the fourth-order stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`
/// so that truncation error stays well below the `f64` tolerance at `h = 1e-3`.
pub fn numeric_gradient(
    f: &mut dyn FnMut(&[Tensor<f64>]) -> Result<f64>,
    inputs: &[Tensor<f64>],
    which: usize,
    eps: f64,
) -> Result<Vec<f64>> {
    let mut work = inputs.to_vec();
    let n = work[which].len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = work[which].data()[i];
        let mut at = |offset: f64| -> Result<f64> {
            work[which].data_mut()[i] = orig + offset;
            f(&work)
        };
        let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
        work[which].data_mut()[i] = orig;
        out.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps));
    }
    Ok(out)
}

/// Worst relative error over all inputs, and the per-input errors.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
}

fn analytic<T: Scalar>(
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.cast(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| {
            grads
                .get(v)
                .map(|g| g.data().iter().map(|x| x.as_f64()).collect())
                .unwrap_or_default()
        })
        .collect())
}

fn forward_f64(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

fn compare(
    point: &[Tensor<f64>],
    grads: Vec<Vec<f64>>,
    f64_fn: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    eps: f64,
) -> Result<GradCheck> {
    let mut per_input = Vec::with_capacity(point.len());
    for (i, g) in grads.iter().enumerate() {
        let mut eval = |ts: &[Tensor<f64>]| forward_f64(ts, f64_fn);
        let numeric = numeric_gradient(&mut eval, point, i, eps)?;
        per_input.push(rel_error(g, &numeric));
    }
    Ok(GradCheck {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
    })
}

/// Analytic gradient on an `f32` tape against `f64` finite differences.
///
/// `f32_fn` and `f64_fn` must describe the same computation; the
/// [`gradcheck!`](crate::gradcheck!) macro writes both from one body.
pub fn check_f32(
    inputs: &[Tensor<f64>],
    f32_fn: &dyn Fn(&mut Tape<f32>, &[Var]) -> Result<Var>,
    f64_fn: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    eps: f64,
) -> Result<GradCheck> {
    let rounded: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast::<f32>().cast::<f64>()).collect();
    let grads = analytic(&rounded, f32_fn)?;
    compare(&rounded, grads, f64_fn, eps)
}

/// Analytic gradient and finite differences, both in `f64`.
pub fn check_f64(
    inputs: &[Tensor<f64>],
    f64_fn: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    eps: f64,
) -> Result<GradCheck> {
    let grads = analytic(inputs, f64_fn)?;
    compare(inputs, grads, f64_fn, eps)
}

/// Runs [`check_f32`] and [`check_f64`] on one closure body written once.
///
/// ```
/// use defectscan_core::{gradcheck, tensor::Tensor};
/// let x = Tensor::<f64>::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
/// let (c32, c64) = gradcheck!(&[x], |tape, v| {
///     let y = tape.mul(v[0], v[0])?;
///     tape.sum_all(y)
/// })
/// .unwrap();
/// assert!(c32.max_rel_error < 1e-4 && c64.max_rel_error < 1e-7);
/// ```
#[macro_export]
macro_rules! gradcheck {
    ($inputs:expr, |$tape:ident, $v:ident| $body:expr) => {{
        let inputs: &[$crate::tensor::Tensor<f64>] = $inputs;
        let f32_fn = |$tape: &mut $crate::tensor::Tape<f32>,
                      $v: &[$crate::tensor::Var]|
         -> $crate::Result<$crate::tensor::Var> { $body };
        let f64_fn = |$tape: &mut $crate::tensor::Tape<f64>,
                      $v: &[$crate::tensor::Var]|
         -> $crate::Result<$crate::tensor::Var> { $body };
        $crate::gradcheck::check_f32(inputs, &f32_fn, &f64_fn, $crate::gradcheck::DEFAULT_EPS).and_then(
            |c32| {
                $crate::gradcheck::check_f64(inputs, &f64_fn, $crate::gradcheck::DEFAULT_EPS)
                    .map(|c64| (c32, c64))
            },
        )
    }};
}
