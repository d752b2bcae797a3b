//! Finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Gradients smaller than this (times the loss scale) are compared in
/// absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// [`relative_error`] with the floor scaled by `max(1, |f|)`.
///
/// Central differences of a loss of size `|f|` carry roundoff of roughly
/// `ε·|f| / h`, so a fixed floor would flag near-zero gradients of large
/// losses on noise alone.
pub fn scaled_relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = RELATIVE_ERROR_FLOOR * loss.abs().max(1.0);
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares `∂f/∂θ` from [`Graph::backward`] against central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, coordinate by coordinate, and returns the
/// largest relative error.
pub fn grad_check<T, F>(f: F, theta: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>, Var) -> Result<Var>,
{
    grad_check_input(&ParamStore::new(), f, theta, h)
}

/// [`grad_check`] for a function that also reads parameters from `store`.
pub fn grad_check_input<T, F>(store: &ParamStore<T>, f: F, theta: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>, Var) -> Result<Var>,
{
    let eval = |t: Tensor<T>| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let x = g.input(t);
        let y = f(&mut g, x)?;
        Ok(g.scalar_value(y).as_f64())
    };
    let mut g = Graph::with_params(store);
    let x = g.input(theta.clone());
    let y = f(&mut g, x)?;
    let base = g.scalar_value(y).as_f64();
    let grads = g.backward(y)?;
    let zeros = vec![T::zero(); theta.len()];
    let analytic = grads.of(x).unwrap_or(&zeros).to_vec();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = theta.clone();
        plus.data_mut()[i] += T::of(h);
        let mut minus = theta.clone();
        minus.data_mut()[i] -= T::of(h);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(scaled_relative_error(a.as_f64(), numeric, base));
    }
    Ok(worst)
}

/// Parameter-gradient check of a loss built from `store`.
///
/// At most `max_coords` coordinates per parameter tensor are probed, spread
/// evenly through the tensor; `None` probes all of them.
pub fn grad_check_params<T, F>(
    store: &ParamStore<T>,
    f: F,
    h: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let y = f(&mut g)?;
        Ok(g.scalar_value(y).as_f64())
    };
    let (base, grads) = {
        let mut g = Graph::with_params(store);
        let y = f(&mut g)?;
        (g.scalar_value(y).as_f64(), g.backward(y)?)
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let analytic = grads
            .param(id)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); n]);
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n / m,
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + T::of(h);
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - T::of(h);
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(scaled_relative_error(analytic[i].as_f64(), numeric, base));
        }
    }
    Ok(worst)
}
