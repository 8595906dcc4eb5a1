//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::{CorruptRule, Tape, Var};

/// Outcome of a gradient check over one or more inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, inputs: &[Tensor], corrupt: Option<CorruptRule>) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_corrupt_rule(corrupt);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok(tape.scalar(out))
}

/// Compares the tape gradient of a scalar function of several inputs against
/// central differences `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` for every
/// coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, eps, None)
}

/// As [`grad_check_many`], with an optional deliberately broken backward rule.
pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    corrupt: Option<CorruptRule>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    if inputs.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("grad_check inputs must be finite"));
    }

    let first = eval(&f, inputs, corrupt)?;
    let second = eval(&f, inputs, corrupt)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::with_corrupt_rule(corrupt);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("param leaf").to_vec())
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x0 = input.data()[j];
            work[ti].data_mut()[j] = x0 + eps;
            let plus = eval(&f, &work, corrupt)?;
            work[ti].data_mut()[j] = x0 - eps;
            let minus = eval(&f, &work, corrupt)?;
            work[ti].data_mut()[j] = x0;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][j];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (ti, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form returning the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
        .map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;
    use std::cell::Cell;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::randn(vec![5], 1.0, &mut SeededRng::new(1));
        let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn softmax_weighted_sum() {
        let mut rng = SeededRng::new(2);
        let x = Tensor::randn(vec![6], 1.0, &mut rng);
        let v = Tensor::randn(vec![6], 1.0, &mut rng);
        let err = grad_check(
            |t, x| {
                let p = t.softmax(x);
                let vv = t.constant(&v);
                let pv = t.mul(p, vv)?;
                Ok(t.sum(pv))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn nondeterministic_function_rejected() {
        let calls = Cell::new(0u32);
        let x = Tensor::vector(&[1.0, 2.0]);
        let r = grad_check(
            |t, x| {
                calls.set(calls.get() + 1);
                let s = t.sum(x);
                Ok(t.add_scalar(s, f64::from(calls.get())))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn nonpositive_eps_rejected() {
        let x = Tensor::vector(&[1.0]);
        assert!(grad_check(|t, x| Ok(t.sum(x)), &x, 0.0).is_err());
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let x = Tensor::vector(&[0.3, -1.2, 2.0]);
        let f = |t: &mut Tape, v: &[Var]| {
            let g = t.gelu(v[0]);
            Ok(t.sum(g))
        };
        let ok = grad_check_with(f, std::slice::from_ref(&x), 1e-5, None).unwrap();
        assert!(ok.max_rel_error < 1e-6);
        let bad = grad_check_with(f, std::slice::from_ref(&x), 1e-5, Some(CorruptRule::Gelu)).unwrap();
        assert!(bad.max_rel_error > 1e-2);
    }
}
