//! Central finite differences, the oracle every tape gradient is checked against.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every coordinate `i`.
pub fn finite_diff_grad<S: Scalar>(
    mut f: impl FnMut(&Tensor<S>) -> Result<S>,
    x: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    if !(eps > S::zero()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = x.clone().into_data();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()))?;
        probe[i] = orig - eps;
        let minus = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()))?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        grad.push((plus - minus) / (S::lit(2.0) * eps));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// `|a − b| ≤ atol + rtol·max(|a|, |b|)` elementwise. Returns the first
/// offending index on failure.
pub fn allclose<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, rtol: f64, atol: f64) -> Result<(), usize> {
    if a.shape() != b.shape() {
        return Err(0);
    }
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        let (x, y) = (x.as_f64(), y.as_f64());
        if (x - y).abs() > atol + rtol * x.abs().max(y.abs()) {
            return Err(i);
        }
    }
    Ok(())
}
