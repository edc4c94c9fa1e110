//! Central finite-difference gradient checking.

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn check_eps(eps: f64) -> Result<()> {
    if (1e-7..=1e-3).contains(&eps) {
        Ok(())
    } else {
        Err(Error::Contract(format!("grad_check eps {eps} outside [1e-7, 1e-3]")))
    }
}

fn scalar_of(v: Var<'_>) -> Result<f64> {
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check objective must be scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Relative error used throughout: `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), eps)
}

/// As [`grad_check`], over several inputs at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_eps(eps)?;
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        scalar_of(loss)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get(v)).collect()
    };
    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.leaf(t.clone())).collect();
        scalar_of(f(&tape, &vars)?)
    };
    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    for (which, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = probe[which].data()[j];
            probe[which].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[j] = orig;
            let numeric = (plus - minus) / ((orig + eps) - (orig - eps));
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Gradient check over every parameter of a store.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    check_eps(eps)?;
    let analytic = {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let loss = f(&tape, &bound)?;
        scalar_of(loss)?;
        bound.grads(&tape.backward(loss)?)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = s.bind(&tape);
        scalar_of(f(&tape, &bound)?)
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = probe.tensors()[i].data()[j];
            probe.tensors_mut()[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe.tensors_mut()[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / ((orig + eps) - (orig - eps));
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
    }
    Ok(worst)
}
