use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(parameter, flat index)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

const DENOM_FLOOR: f64 = 1e-8;

/// Compares reverse-mode gradients of a scalar function against
/// `(f(p+h) - f(p-h)) / 2h`, one coordinate at a time.
///
/// `f` records its computation on the given tape using the leaf handles
/// (one per entry of `params`, same order) and returns the scalar result.
pub fn finite_diff_check<F>(params: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(params, |_| h, f)
}

/// [`finite_diff_check`] with the step of each coordinate chosen from its
/// analytic gradient.
pub fn finite_diff_check_with<S, F>(params: &[Tensor<f64>], step: S, mut f: F) -> Result<GradCheck>
where
    S: Fn(f64) -> f64,
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    drop(tape);

    let mut eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for p in 0..work.len() {
        for i in 0..work[p].numel() {
            let a = analytic[p].data()[i];
            let h = step(a);
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((p, i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
