//! Central-difference gradient oracle, independent of the tape's reverse pass.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Central differences of a scalar-valued function at `x`:
/// (f(x + h e_i) - f(x - h e_i)) / (2h) for every coordinate.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: f64,
) -> Result<Tensor<T>> {
    let hs = T::from_f64(h);
    let two_h = T::from_f64(2.0 * h);
    let mut probe = x.clone();
    let mut grad = vec![T::ZERO; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + hs;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - hs;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        grad[i] = (up - down) / two_h;
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Worst relative disagreement between two gradients. Entries below the
/// `floor` magnitude are compared absolutely at floor scale.
pub fn max_rel_error<T: Scalar>(analytic: &[T], numeric: &[T], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let (a, n) = (a.to_f64(), n.to_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
