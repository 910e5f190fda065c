//! Central finite-difference verification of reverse-mode gradients.

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of [`check_gradient`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub value: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.shape() != (1, 1) {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got {:?}",
            out.shape()
        )));
    }
    Ok(out.item())
}

/// Compares the reverse-mode gradient of `f` at `params` with central
/// differences `(f(p + ε·eᵢ) − f(p − ε·eᵢ)) / 2ε` over every coordinate.
pub fn check_gradient<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {eps}"
        )));
    }

    let (value, analytic) = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = out.backward()?;
        (
            out.item(),
            vars.iter().map(|v| grads.wrt(v)).collect::<Vec<_>>(),
        )
    };

    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0_f64;
    let mut worst = None;
    let mut probe = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let mut fd = Tensor::zeros(param.rows(), param.cols());
        for k in 0..param.len() {
            let orig = param.data()[k];
            let mut at = |delta: f64| -> Result<f64> {
                probe[pi].data_mut()[k] = orig + delta;
                let v = evaluate(&f, &probe).map_err(|e| Error::Evaluation {
                    param: pi,
                    index: k,
                    detail: e.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(Error::Evaluation {
                        param: pi,
                        index: k,
                        detail: format!("function value {v} at offset {delta}"),
                    });
                }
                Ok(v)
            };
            let plus = at(eps)?;
            let minus = at(-eps)?;
            probe[pi].data_mut()[k] = orig;

            let num = (plus - minus) / (2.0 * eps);
            fd.data_mut()[k] = num;
            let rel = (analytic[pi].data()[k] - num).abs() / num.abs().max(1.0);
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(rel);
                worst = Some((pi, k));
            }
        }
        numeric.push(fd);
    }

    Ok(GradCheckReport {
        max_rel_error,
        worst,
        value,
        analytic,
        numeric,
    })
}
