//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::layers::Parameterized;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked elements.
    pub max_rel_err: f64,
    /// Elements where either gradient came out non-finite.
    pub nan_count: usize,
    pub checked: usize,
}

impl FdReport {
    fn new() -> Self {
        FdReport {
            max_rel_err: 0.0,
            nan_count: 0,
            checked: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        if !analytic.is_finite() || !numeric.is_finite() {
            self.nan_count += 1;
            return;
        }
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        self.max_rel_err = self.max_rel_err.max(err);
    }

    pub fn merge(self, other: FdReport) -> FdReport {
        FdReport {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            nan_count: self.nan_count + other.nan_count,
            checked: self.checked + other.checked,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.nan_count == 0 && self.max_rel_err < tol
    }
}

/// Checks `d f / d x` for a scalar-valued taped function `f`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let x = x.clone().with_requires_grad(true);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.of(&x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out)[0])
    };

    let mut report = FdReport::new();
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        report.record(a, (plus - minus) / (2.0 * h));
    }
    Ok(report)
}

/// Checks the gradient of `loss` with respect to every trainable parameter
/// of `model`, perturbing one element at a time.
pub fn check_parameters<M, F>(model: &mut M, loss: F, h: f64) -> Result<FdReport>
where
    M: Parameterized<f64>,
    F: Fn(&M, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(model, &mut tape)?;
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    model.visit_params(&mut |_, p| {
        if p.requires_grad() {
            analytic.push(grads.of(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]));
        }
    });

    let eval = |model: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(model, &mut tape)?;
        Ok(tape.value(out)[0])
    };

    let mut report = FdReport::new();
    for (which, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = nudge(model, which, i, None);
            nudge(model, which, i, Some(orig + h));
            let plus = eval(model)?;
            nudge(model, which, i, Some(orig - h));
            let minus = eval(model)?;
            nudge(model, which, i, Some(orig));
            report.record(a, (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Reads (and optionally overwrites) element `i` of the `which`-th trainable
/// parameter, returning the previous value.
fn nudge<M: Parameterized<f64>>(model: &mut M, which: usize, i: usize, set: Option<f64>) -> f64 {
    let mut seen = 0;
    let mut old = f64::NAN;
    model.visit_params_mut(&mut |_, p| {
        if !p.requires_grad() {
            return;
        }
        if seen == which {
            old = p.data()[i];
            if let Some(v) = set {
                p.data_mut()[i] = v;
            }
        }
        seen += 1;
    });
    old
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 7.5]).unwrap();
        let report = finite_difference_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                let s = tape.sum(sq);
                Ok(tape.scale(s, 0.5))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        assert_eq!(report.checked, 5);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = finite_difference_check(
            |tape, _x| Ok(tape.constant(Tensor::scalar(4.0))),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.nan_count, 0);
    }

    #[test]
    fn counts_unstable_points() {
        let x = Tensor::new(vec![1], vec![f64::MAX]).unwrap();
        let report = finite_difference_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.nan_count, 1);
    }
}
