//! Central finite differences, used to cross-check analytic gradients.

use crate::tensor::Array;

/// Numerical gradient of `f` at `x` by central differences with step `eps`.
pub fn numeric_grad(x: &Array, eps: f64, mut f: impl FnMut(&Array) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let up = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest relative error between two gradient vectors, with an absolute floor
/// so near-zero entries compare on absolute scale.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
