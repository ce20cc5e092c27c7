use super::{ParamStore, Real};
use crate::error::{contract_err, Result};

/// Bias-corrected Adam moments for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub learning_rate: T,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments with `beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-8`.
    pub fn new(params: &ParamStore<T>, learning_rate: T) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        Self {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon: T::of(1e-8),
            learning_rate,
        }
    }
}

/// One Adam update over every trainable parameter, then clears the gradients.
///
/// Frozen parameters (`requires_grad == false`) are skipped. A trainable
/// parameter without a gradient is a contract error and leaves every
/// parameter untouched.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.first_moment.len() != params.len() {
        return Err(contract_err!(
            "optimizer state tracks {} parameters, store has {}",
            state.first_moment.len(),
            params.len()
        ));
    }
    for (id, p) in params.iter() {
        if p.requires_grad && p.grad.is_none() {
            return Err(contract_err!("parameter {} has no gradient", p.name));
        }
        if state.first_moment[id.index()].len() != p.value.numel() {
            return Err(contract_err!("optimizer moments do not match parameter {}", p.name));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let one = T::one();
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr = state.learning_rate;
    let eps = state.epsilon;
    for (i, p) in params.iter_mut().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let grad = p.grad.take().expect("checked above");
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (((x, &g), mi), vi) in p.value.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
