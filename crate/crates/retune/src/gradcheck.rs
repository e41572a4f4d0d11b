//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compare the analytic gradient of a scalar-valued function against central
/// finite differences at `point`, one coordinate at a time.
///
/// `f` returns the function value and its full analytic gradient; only the
/// value is used for the perturbed evaluations. Returns the worst relative
/// error, with denominator max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<T, F>(mut f: F, point: &Tensor<T>, epsilon: T) -> Result<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<(T, Tensor<T>)>,
{
    if !(epsilon > T::zero() && epsilon <= T::from_f64c(1e-2)) {
        return Err(Error::InvalidArgument(format!(
            "grad_check epsilon {epsilon} outside (0, 1e-2]"
        )));
    }
    let (base, analytic) = f(point)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("function value {base} at probe point")));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::Shape(format!(
            "analytic gradient shape {:?} does not match point {:?}",
            analytic.shape(),
            point.shape()
        )));
    }
    let floor = T::from_f64c(1e-8);
    let two = T::from_f64c(2.0);
    let mut worst = T::zero();
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let (up, _) = f(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let (down, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!(
                "function value at perturbed coordinate {i} is not finite"
            )));
        }
        let numeric = (up - down) / (two * epsilon);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
