use super::{Real, Tensor};

/// Central-difference gradient of a scalar function:
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / 2eps` for every coordinate `i`.
///
/// This is the test oracle for [`super::Graph::backward`] and shares no code
/// with it.
pub fn finite_diff_grad<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> f64,
    x: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    assert!(eps > 0.0, "finite_diff_grad: eps must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::lit(orig.f64() + eps);
        let up = f(&probe);
        probe.data_mut()[i] = T::lit(orig.f64() - eps);
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push(T::lit((up - down) / (2.0 * eps)));
    }
    Tensor::new(x.shape(), grad).expect("finite_diff_grad: shape preserved")
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest coordinate-wise [`rel_error`] between two gradients.
pub fn max_rel_error<T: Real>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| rel_error(a.f64(), n.f64(), floor))
        .fold(0.0, f64::max)
}
