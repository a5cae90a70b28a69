//! Central finite differences, used as an independent oracle for the
//! analytic gradients produced by [`crate::Tape::backward`].

use crate::tensor::Tensor;

/// Numerical derivative of `f` with respect to element `index` of input
/// `which`, by central differences with step `eps`.
pub fn central_difference<F>(inputs: &[Tensor<f64>], which: usize, index: usize, eps: f64, f: &mut F) -> f64
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut probe = inputs.to_vec();
    let base = probe[which].data()[index];
    probe[which].data_mut()[index] = base + eps;
    let plus = f(&probe);
    probe[which].data_mut()[index] = base - eps;
    let minus = f(&probe);
    (plus - minus) / (2.0 * eps)
}

/// Relative discrepancy `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
