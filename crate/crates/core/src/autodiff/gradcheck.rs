use crate::error::{bail, Result};
use crate::scalar::Scalar;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Compares the tape gradient of a scalar function with central differences
/// `(f(x+eps) − f(x−eps)) / (2·eps)` at every coordinate of every input.
///
/// `build` receives a fresh tape and one parameter node per entry of `point`
/// and must return a one-element node. The result is the worst coordinate's
/// relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-3·max|analytic|, 1e-8)`: entries three
/// orders below the largest gradient entry sit at the roundoff floor of the
/// central difference, so they are judged against the gradient's scale.
pub fn grad_check<T, F>(build: F, point: &[Tensor<T>], eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
{
    grad_check_on(Tape::new, build, point, eps)
}

/// As [`grad_check`], with control over how each tape is created (for
/// example to inject a backward fault).
pub fn grad_check_on<T, F, M>(make_tape: M, build: F, point: &[Tensor<T>], eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
    M: Fn() -> Tape<T>,
{
    if !(eps > T::zero() && eps <= T::lit(1e-2)) {
        bail!(Config, "finite-difference step must lie in (0, 1e-2], got {eps}");
    }
    let mut tape = make_tape();
    let ids: Vec<NodeId> = point
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(format!("x{i}"), t.clone()))
        .collect();
    let out = build(&mut tape, &ids)?;
    let base = tape.value(out).item();
    if !base.is_finite() {
        bail!(Numeric, "function value is not finite at the check point");
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = ids.iter().map(|&id| tape.grad(id).clone()).collect();

    let eval = |inputs: &[Tensor<T>]| -> Result<T> {
        let mut t = make_tape();
        let ids: Vec<NodeId> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| t.param(format!("x{i}"), x.clone()))
            .collect();
        let out = build(&mut t, &ids)?;
        let v = t.value(out).item();
        if !v.is_finite() {
            bail!(Numeric, "function value is not finite under perturbation");
        }
        Ok(v)
    };

    let gmax = analytic
        .iter()
        .flat_map(|g| g.data().iter())
        .fold(T::zero(), |m, v| m.max(v.abs()));
    let floor = (T::lit(1e-3) * gmax).max(T::lit(1e-8));
    let two = T::lit(2.0);
    let mut worst = T::zero();
    let mut shifted: Vec<Tensor<T>> = point.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for j in 0..point[p].len() {
            let x0 = point[p].data()[j];
            shifted[p].data_mut()[j] = x0 + eps;
            let up = eval(&shifted)?;
            shifted[p].data_mut()[j] = x0 - eps;
            let down = eval(&shifted)?;
            shifted[p].data_mut()[j] = x0;
            let numeric = (up - down) / (two * eps);
            let a = grad.data()[j];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
