//! Central-finite-difference oracle and a uniform harness that verifies every
//! analytic VJP in the library.
//!
//! Each probe draws random inputs and a random cotangent, contracts the
//! analytic VJP with the cotangent, and compares against the numeric gradient
//! of the matching scalar projection. Failures are reported, not thrown.

pub mod suite;

use crate::error::{Result, TroiError};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_PROBES: usize = 16;

/// Relative-error floor: rel = |a - n| / max(|a|, |n|, REL_FLOOR).
pub const REL_FLOOR: f64 = 1e-8;

/// An operation under gradient check: a forward map from a list of input
/// tensors to one output tensor, and the matching VJP returning one gradient
/// per input.
pub trait VjpOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>>;
}

/// Worst-case comparison between analytic and numeric gradients for one op.
///
/// `max_rel_err` is the worst, over probes and inputs, of
/// `|a - n| / max(|a|, |n|, 1e-8)` with the gradients compared under the
/// max-abs norm, i.e. relative to the gradient's own scale. This keeps the
/// check insensitive to finite-difference cancellation noise on individual
/// near-zero components while still flagging any real defect (a single
/// flipped sign scores near 1).
#[derive(Clone, Debug)]
pub struct GradReport {
    pub op: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub elements: usize,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} max_abs={:>9.3e}  max_rel={:>9.3e}  n={:<6} tol={:.0e}  {}",
            self.op,
            self.max_abs_err,
            self.max_rel_err,
            self.elements,
            self.tol,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps), per element.
pub fn numeric_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(TroiError::invalid("numeric_gradient eps must be > 0"));
    }
    let mut grad = Tensor::zeros(x.dims())?;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TroiError::NonFinite(
                "numeric_gradient function output".into(),
            ));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Draws inputs for a [`VjpOp`]; called once per probe.
pub type Sampler = Box<dyn Fn(&mut SplitMix64) -> Result<Vec<Tensor>>>;

/// Rejects inputs the check is not valid on (e.g. near top-K ties).
pub type Accept = Box<dyn Fn(&[Tensor]) -> bool>;

/// One op wired up for checking: how to sample its inputs, which inputs to
/// reject, and the pass tolerance.
pub struct CheckCase {
    pub op: Box<dyn VjpOp>,
    pub sampler: Sampler,
    pub accept: Option<Accept>,
    pub tol: f64,
}

const MAX_RESAMPLES: usize = 1000;

/// Run `probes` random probes of one case and aggregate worst-case errors.
pub fn check_op(
    case: &CheckCase,
    probes: usize,
    eps: f64,
    rng: &mut SplitMix64,
) -> Result<GradReport> {
    if probes == 0 {
        return Err(TroiError::invalid("check_op requires probes >= 1"));
    }
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut elements = 0usize;

    for _ in 0..probes {
        let inputs = sample_accepted(case, rng)?;
        let out = case.op.forward(&inputs)?;
        let cot_data: Vec<f64> = (0..out.numel()).map(|_| rng.next_signed_unit()).collect();
        let cotangent = Tensor::from_vec(out.dims(), cot_data)?;
        let analytic = case.op.vjp(&inputs, &cotangent)?;
        if analytic.len() != inputs.len() {
            return Err(TroiError::invalid(format!(
                "{}: vjp returned {} gradients for {} inputs",
                case.op.name(),
                analytic.len(),
                inputs.len()
            )));
        }

        for (idx, input) in inputs.iter().enumerate() {
            let project = |x: &Tensor| -> Result<f64> {
                let mut probe_inputs: Vec<Tensor> = inputs.clone();
                probe_inputs[idx] = x.clone();
                let y = case.op.forward(&probe_inputs)?;
                let mut acc = 0.0;
                for (a, b) in y.data().iter().zip(cotangent.data()) {
                    acc += a * b;
                }
                Ok(acc)
            };
            let numeric = numeric_gradient(project, input, eps)?;
            let mut diff_norm = 0.0f64;
            let mut a_norm = 0.0f64;
            let mut n_norm = 0.0f64;
            for (&a, &n) in analytic[idx].data().iter().zip(numeric.data()) {
                diff_norm = diff_norm.max((a - n).abs());
                a_norm = a_norm.max(a.abs());
                n_norm = n_norm.max(n.abs());
                elements += 1;
            }
            let rel = diff_norm / a_norm.max(n_norm).max(REL_FLOOR);
            if diff_norm > max_abs {
                max_abs = diff_norm;
            }
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }

    Ok(GradReport {
        op: case.op.name().to_string(),
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        elements,
        tol: case.tol,
        pass: max_rel < case.tol,
    })
}

fn sample_accepted(case: &CheckCase, rng: &mut SplitMix64) -> Result<Vec<Tensor>> {
    for _ in 0..MAX_RESAMPLES {
        let inputs = (case.sampler)(rng)?;
        match &case.accept {
            Some(accept) if !accept(&inputs) => continue,
            _ => return Ok(inputs),
        }
    }
    Err(TroiError::invalid(format!(
        "{}: no acceptable inputs after {MAX_RESAMPLES} resamples",
        case.op.name()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_sum_is_ones() {
        let x = Tensor::from_vec(&[3], vec![0.2, -0.4, 1.5]).unwrap();
        let g = numeric_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn numeric_gradient_of_square() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let g = numeric_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn numeric_gradient_of_constant_is_zero() {
        let x = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = numeric_gradient(|_| Ok(7.5), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn numeric_gradient_rejects_non_finite() {
        let x = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        assert!(numeric_gradient(|_| Ok(f64::NAN), &x, 1e-5).is_err());
    }
}
