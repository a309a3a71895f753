//! Central finite differences, used as the independent route when checking
//! analytic gradients. Only forward evaluations are involved.

use crate::tensor::Tensor;

/// Numerical gradient of a scalar function by central differences.
pub fn numerical_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Tensor::from_vec(x.shape(), out)
}

/// `|a - b| / max(|a|, |b|)` over whole tensors; 0 when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let x = Tensor::from_vec(&[2], vec![1.5, -0.5]);
        let g = numerical_grad(|t| t.data().iter().map(|v| v.powi(3)).sum(), &x, 1e-5);
        let exact = Tensor::from_vec(&[2], vec![3.0 * 2.25, 3.0 * 0.25]);
        assert!(relative_error(&g, &exact) < 1e-8);
    }

    #[test]
    fn zero_vs_zero() {
        let z = Tensor::zeros(&[3]);
        assert_eq!(relative_error(&z, &z), 0.0);
    }
}
