use super::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

/// Compares tape gradients of `f` against central differences over every
/// scalar in `params`.
///
/// The per-coordinate error is
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(params: &ParamSet, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    grad_check_subset(params, eps, params.ids().collect::<Vec<_>>().as_slice(), f)
}

/// Same as [`grad_check`] restricted to `ids`.
pub fn grad_check_subset<F>(
    params: &ParamSet,
    eps: f64,
    ids: &[ParamId],
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "grad_check eps must lie in [1e-6, 1e-3], got {eps}"
        )));
    }

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::with_params(p, false);
        let out = f(&mut tape)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::Contract("grad_check target is not scalar".into()));
        }
        Ok(v.item())
    };

    let (base, analytic) = {
        let mut tape = Tape::with_params(params, true);
        let loss = f(&mut tape)?;
        tape.backward(loss)?;
        let grads: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| tape.param_grad(id).expect("params bound"))
            .collect();
        (tape.value(loss).item(), grads)
    };
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "grad_check target is not deterministic: {base} vs {again}"
        )));
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    for (&id, grad) in ids.iter().zip(&analytic) {
        for coord in 0..grad.len() {
            let orig = work.get(id).values()[coord];
            work.get_mut(id).values_mut()[coord] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).values_mut()[coord] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).values_mut()[coord] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[coord];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), coord));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
