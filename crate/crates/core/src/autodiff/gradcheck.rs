//! Central-difference verification of recorded gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative disagreement between the tape gradient of `f` and
/// central differences with step `eps`, over every entry of `params`.
///
/// The relative error of one entry is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = analytic_gradients(&f, params)?;
    compare_with_finite_differences(&f, params, &analytic, eps)
}

/// [`finite_diff_check`] against caller-supplied gradients, one per entry
/// of `params`.
pub fn compare_with_finite_differences<F>(
    f: &F,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let shapes_match = analytic.len() == params.len()
        && analytic.iter().zip(params).all(|(a, p)| a.shape() == p.shape());
    if !shapes_match {
        return Err(Error::InvalidArgument(
            "one gradient per parameter, of matching shape, is required".into(),
        ));
    }
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for idx in 0..params[p].len() {
            let orig = params[p].data()[idx];
            probe[p].data_mut()[idx] = orig + eps;
            let up = evaluate(f, &probe)?;
            probe[p].data_mut()[idx] = orig - eps;
            let down = evaluate(f, &probe)?;
            probe[p].data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[idx];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss, &vars)?;
    Ok(vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("requested leaf"))
        .collect())
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::inference();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    Ok(f(&tape, &vars)?.value().item())
}
