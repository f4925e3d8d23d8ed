use super::Tensor;

/// Central-difference gradient of a scalar function, used as an oracle for the
/// autodiff engine.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(eps > 0.0, "finite_diff_grad: eps must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}
