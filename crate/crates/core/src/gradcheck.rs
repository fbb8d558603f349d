//! Central finite-difference gradient oracle.
//!
//! Used throughout the test suites to falsify the analytic backward pass:
//! the oracle only ever evaluates the forward pass, so it stays independent
//! of the adjoint rules it checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::init;
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Differences below this are treated as exact matches, so true-zero
/// gradients are not penalized by finite-difference noise.
pub const ABS_FLOOR: f64 = 1e-9;

/// Central finite-difference gradient of `loss_fn` w.r.t. every parameter
/// in the store. Parameters are perturbed one scalar at a time and restored
/// afterwards.
pub fn fd_param_gradients(
    store: &mut ParamStore,
    step: f64,
    mut loss_fn: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<Vec<Tensor>> {
    let mut grads = Vec::with_capacity(store.len());
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).value.shape();
        let mut fd = Tensor::zeros(shape.0, shape.1);
        for k in 0..shape.0 * shape.1 {
            let original = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = original + step;
            let plus = loss_fn(store)?;
            store.get_mut(id).value.data_mut()[k] = original - step;
            let minus = loss_fn(store)?;
            store.get_mut(id).value.data_mut()[k] = original;
            fd.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        grads.push(fd);
    }
    Ok(grads)
}

/// Largest element-wise relative error between an analytic gradient and its
/// finite-difference estimate. Differences under [`ABS_FLOOR`] count as zero.
pub fn max_rel_error(analytic: &Tensor, fd: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), fd.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(fd.data())
        .map(|(&a, &f)| {
            let diff = (a - f).abs();
            if diff <= ABS_FLOOR {
                0.0
            } else {
                diff / a.abs().max(f.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Convenience: analytic gradients (from `Parameter::grad`) vs the
/// finite-difference oracle, returning the worst relative error over all
/// parameters. The store's gradients must already be populated.
pub fn worst_param_rel_error(
    store: &mut ParamStore,
    step: f64,
    loss_fn: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    let analytic: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();
    let fd = fd_param_gradients(store, step, loss_fn)?;
    Ok(analytic
        .iter()
        .zip(&fd)
        .map(|(a, f)| max_rel_error(a, f))
        .fold(0.0, f64::max))
}
