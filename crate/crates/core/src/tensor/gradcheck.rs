//! Central finite-difference oracle for tape gradients.
//!
//! Only forward evaluations are used to build the numerical gradient, so the
//! check stays independent of every backward rule it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{contract_err, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input: `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares analytic and central-difference gradients of the scalar built by
/// `build` with respect to every tensor in `inputs`.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    check_with_params(&ParamStore::new(), inputs, step, build)
}

/// Like [`check`], with `store` readable through `Graph::param`. Only the
/// gradients of `inputs` are compared.
pub fn check_with_params<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    step: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        if analytic.len() != inputs[k].numel() {
            return Err(contract_err!("gradient length mismatch for input {k}"));
        }
        let mut perturbed = inputs.to_vec();
        let mut num = 0.0;
        let mut den_a = 0.0;
        let mut den_n = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let x = inputs[k].data()[i];
            perturbed[k].data_mut()[i] = x + step;
            let fp = eval(&perturbed)?;
            perturbed[k].data_mut()[i] = x - step;
            let fm = eval(&perturbed)?;
            perturbed[k].data_mut()[i] = x;
            let numeric = (fp - fm) / (2.0 * step);
            num += (a - numeric).powi(2);
            den_a += a.powi(2);
            den_n += numeric.powi(2);
        }
        let scale = den_a.sqrt().max(den_n.sqrt());
        relative_errors.push(if scale < 1e-12 { num.sqrt() } else { num.sqrt() / scale });
    }
    Ok(GradCheckReport { relative_errors })
}

/// Checks parameter gradients along one seeded random direction per tensor:
/// the analytic `g · v` against `(f(θ + h v) - f(θ - h v)) / 2h`. Cheap
/// enough for whole models, where per-element differences are not.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    step: f64,
    seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = build(&mut g)?;
        g.value(out).item()
    };
    let grads = {
        let mut g = Graph::with_params(store);
        let out = build(&mut g)?;
        g.backward(out)?
    };
    // a parameter bound more than once contributes once per binding
    let mut analytic: std::collections::HashMap<ParamId, Vec<f64>> = std::collections::HashMap::new();
    for (id, g) in grads.param_grads() {
        let acc = analytic.entry(id).or_insert_with(|| vec![0.0; g.len()]);
        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut relative_errors = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.value(id).numel();
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        v.iter_mut().for_each(|x| *x /= norm);
        let a: f64 = analytic
            .get(&id)
            .map_or(0.0, |g| g.iter().zip(&v).map(|(g, d)| g * d).sum());
        let shifted = |sign: f64| -> Result<f64> {
            let mut s = store.clone();
            for (x, d) in s.get_mut(id).value.data_mut().iter_mut().zip(&v) {
                *x += sign * step * d;
            }
            eval(&s)
        };
        let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * step);
        let scale = a.abs().max(numeric.abs());
        relative_errors.push(if scale < 1e-9 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / scale
        });
    }
    Ok(GradCheckReport { relative_errors })
}
