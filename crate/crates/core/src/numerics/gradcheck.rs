use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |analytic_i − numeric_i| / (|numeric_i| + 1e-8)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Maximum relative error between the tape gradient of scalar `f` at `x` and
/// an extrapolated central difference with step `eps`, over every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    Ok(grad_check_with(f, x, eps, None)?.max_rel_error)
}

/// Like [`grad_check`], optionally restricted to a subset of element indices.
pub fn grad_check_with<F>(
    f: F,
    x: &Tensor,
    eps: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let analytic_full = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let y = f(&mut tape, xv)?;
        tape.backward(y)?;
        tape.grad_or_zeros(xv)
    };
    if !analytic_full.all_finite() {
        return Err(Error::NumericDomain("non-finite analytic gradient".into()));
    }
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let xv = tape.leaf(t, false);
        let y = f(&mut tape, xv)?;
        Ok(tape.value(y).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: Vec::with_capacity(idx.len()),
        numeric: Vec::with_capacity(idx.len()),
    };
    let central = |i: usize, h: f64| -> Result<f64> {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        Ok((eval(plus)? - eval(minus)?) / (2.0 * h))
    };
    for &i in idx {
        // Richardson extrapolation of two central differences: O(eps⁴).
        let numeric = (4.0 * central(i, eps / 2.0)? - central(i, eps)?) / 3.0;
        if !numeric.is_finite() {
            return Err(Error::NumericDomain("non-finite finite difference".into()));
        }
        let analytic = analytic_full.data()[i];
        let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn quadratic_function() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let report = grad_check_with(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-3,
            None,
        )
        .unwrap();
        assert_eq!(report.analytic, vec![2.0, 4.0]);
        assert!(report.max_rel_error < 1e-3);
    }
}
