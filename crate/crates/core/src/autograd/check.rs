use rayon::prelude::*;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(param index, flat element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of a scalar function against
/// `(f(p+eps) − f(p−eps)) / 2eps`, element by element.
///
/// `f` receives a fresh tape and one leaf per entry of `params` and must
/// return a scalar node. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!(
            "finite-difference eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).data()[0])
    };

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |e| (pi, e)))
        .collect();

    let numeric: Vec<f64> = coords
        .par_iter()
        .map(|&(pi, e)| {
            let mut shifted = params.to_vec();
            let orig = shifted[pi].data()[e];
            shifted[pi].data_mut()[e] = orig + eps;
            let plus = eval(&shifted)?;
            shifted[pi].data_mut()[e] = orig - eps;
            let minus = eval(&shifted)?;
            Ok((plus - minus) / (2.0 * eps))
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (&(pi, e), &num) in coords.iter().zip(&numeric) {
        let ana = analytic[pi].data()[e];
        let denom = ana.abs().max(num.abs()).max(1e-8);
        let rel = (ana - num).abs() / denom;
        if rel > report.max_rel_error || report.worst.is_none() {
            report = GradCheck {
                max_rel_error: rel.max(report.max_rel_error),
                worst: Some((pi, e)),
                analytic: ana,
                numeric: num,
            };
        }
    }
    Ok(report)
}
