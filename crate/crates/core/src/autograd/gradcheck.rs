//! Central finite differences for validating tape gradients.

use ndarray::ArrayD;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_gradient(f: impl Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, h: f64) -> ArrayD<f64> {
    let mut probe = x.clone();
    let mut grad = ArrayD::zeros(x.raw_dim());
    for i in 0..x.len() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + h;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - h;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `max|a - b| / max(max|a|, max|b|, floor)`: a scale-aware relative error that
/// stays meaningful when individual entries are near zero.
pub fn relative_error(a: &ArrayD<f64>, b: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a
        .iter()
        .chain(b.iter())
        .map(|v| v.abs())
        .fold(floor, f64::max);
    diff / scale
}
