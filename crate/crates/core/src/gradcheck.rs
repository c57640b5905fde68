//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Floor on the denominator of the relative error.
const REL_FLOOR: f64 = 1e-8;

/// Element with the largest relative error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Offender {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes that landed on a different piece of a piecewise-linear op than
    /// the base point. Non-zero means the point sits too close to a kink for
    /// finite differences to be meaningful.
    pub kink_crossings: usize,
    pub worst: Option<Offender>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Value and branch signature of `f` at `inputs`.
fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<u64>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((scalar_of(&tape, out)?, tape.branch_signature()))
}

fn scalar_of(tape: &Tape, out: Var) -> Result<f64> {
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.values()[0])
}

/// Compares the tape gradient of scalar `f` at `inputs` against central
/// differences with step `eps`, over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Usage(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let signature = tape.branch_signature();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        kink_crossings: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        for element in 0..grad.len() {
            let original = probe[input].values()[element];
            probe[input].values_mut()[element] = original + eps;
            let (plus, sig_plus) = evaluate(&f, &probe)?;
            probe[input].values_mut()[element] = original - eps;
            let (minus, sig_minus) = evaluate(&f, &probe)?;
            probe[input].values_mut()[element] = original;
            report.kink_crossings += usize::from(sig_plus != signature) + usize::from(sig_minus != signature);

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.values()[element];
            let rel_error = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || rel_error > report.max_rel_error {
                report.max_rel_error = rel_error;
                report.worst = Some(Offender {
                    input,
                    element,
                    analytic: a,
                    numeric,
                    rel_error,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 4.0, 2.5, -0.7, 9.1]).unwrap();
        let r = grad_check(|t, v| t.sum(v[0]), &[x], DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error <= 1e-7, "{r:?}");
        assert_eq!(r.checked, 6);
        assert_eq!(r.kink_crossings, 0);
    }

    #[test]
    fn counts_probes_across_a_kink() {
        let x = Tensor::vector(vec![3e-6, 0.5]);
        let r = grad_check(|t, v| {
            let y = t.abs(v[0])?;
            t.sum(y)
        }, &[x], DEFAULT_EPS)
        .unwrap();
        assert_eq!(r.kink_crossings, 1);
    }

    #[test]
    fn rejects_vector_output() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(|t, v| t.scale(v[0], 2.0), &[x], DEFAULT_EPS).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|t, v| t.sum(v[0]), &[x], 0.0).is_err());
    }
}
