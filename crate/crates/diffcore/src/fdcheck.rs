//! Central finite differences, used as the gradient oracle in tests.

use crate::Tensor;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `max_i |ad_i - fd_i| / (|fd_i| + 1e-8)`.
pub fn max_relative_error(ad: &Tensor, fd: &Tensor) -> f64 {
    assert_eq!(ad.shape(), fd.shape());
    ad.data()
        .iter()
        .zip(fd.data())
        .map(|(a, f)| (a - f).abs() / (f.abs() + 1e-8))
        .fold(0.0, f64::max)
}
