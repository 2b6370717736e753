use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    pub passed: bool,
    /// `(param index, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p)).collect();
    let out = f(&mut tape, &vars)?;
    tape.scalar(out)
        .ok_or_else(|| Error::Contract("gradient check needs a scalar function".into()))
}

/// Compares tape gradients of `f` against central differences
/// `(f(p + eps) - f(p - eps)) / 2 eps`, element by element. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], eps: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.scalar(out).ok_or_else(|| Error::Contract("gradient check needs a scalar function".into()))?;
    if params.is_empty() {
        return Ok(GradCheckReport {
            max_relative_error: 0.0,
            checked: 0,
            passed: true,
            worst: None,
        });
    }
    let again = evaluate(&f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Numerical(format!(
            "function is not deterministic: two evaluations gave {base} and {again}; disable dropout"
        )));
    }
    tape.backward(out)?;

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        passed: true,
        worst: None,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; params[pi].len()]);
        for ei in 0..params[pi].len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let up = evaluate(&f, &work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let down = evaluate(&f, &work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel.max(report.max_relative_error);
                if rel >= report.max_relative_error {
                    report.worst = Some((pi, ei, a, numeric));
                }
            }
        }
    }
    report.passed = report.max_relative_error < tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let p = vec![Tensor::from_vec(vec![0.3, -1.2, 2.5])];
        let r = finite_difference_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.scale(sq, 0.5);
                Ok(t.sum(s))
            },
            &p,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_relative_error < 1e-8);
    }

    #[test]
    fn zero_parameters_pass_vacuously() {
        let r = finite_difference_check(
            |t, _| {
                let c = t.constant(&Tensor::scalar(4.0));
                Ok(c)
            },
            &[],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(r.passed);
        assert_eq!(r.checked, 0);
    }

    #[test]
    fn nondeterminism_aborts_the_check() {
        use std::cell::Cell;
        let calls = Cell::new(0u64);
        let p = vec![Tensor::from_vec(vec![1.0; 16])];
        let res = finite_difference_check(
            |t, v| {
                calls.set(calls.get() + 1);
                let d = t.dropout(v[0], 0.5, 3, calls.get())?;
                Ok(t.sum(d))
            },
            &p,
            1e-5,
            1e-6,
        );
        assert!(matches!(res, Err(Error::Numerical(_))));
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let p = vec![Tensor::from_vec(vec![1.0])];
        assert!(finite_difference_check(|t, v| Ok(t.sum(v[0])), &p, 0.0, 1e-6).is_err());
    }
}
