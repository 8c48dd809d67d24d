use crate::autodiff::{Gradients, Tensor};
use crate::error::{bail, Result};
use crate::policy::PolicyParams;
use crate::scalar::Scalar;

/// First and second moment estimates per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &PolicyParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

/// One bias-corrected Adam step in the ascent direction
/// (`θ ← θ + lr · m̂ / (√v̂ + ε)`). Arrays for which `frozen` holds are
/// left untouched.
pub fn adam_step<T: Scalar>(
    params: &mut PolicyParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: T,
    frozen: impl Fn(&str) -> bool,
) -> Result<()> {
    if state.m.len() != params.len() {
        bail!(Shape, "optimizer state tracks {} arrays, params have {}", state.m.len(), params.len());
    }
    // Validate everything before touching any state.
    for (name, p) in params.iter() {
        let g = match grads.get(name) {
            Some(g) => g,
            None => bail!(Contract, "no gradient for `{name}`"),
        };
        if g.shape() != p.shape() {
            bail!(Shape, "gradient for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape());
        }
        if !g.is_finite() {
            bail!(Training, "non-finite gradient for `{name}`");
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (k, (name, p)) in params.iter_mut().enumerate() {
        if frozen(name) {
            continue;
        }
        let g = grads.get(name).expect("checked above");
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi += lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}
