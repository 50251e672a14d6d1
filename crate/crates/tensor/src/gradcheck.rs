//! Central finite differences for validating analytic gradients.
//!
//! These helpers only ever evaluate the forward function, so they stay
//! independent of the backward rules they are used to check.

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function of one tensor.
pub fn central_difference(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, step: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape")
}

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps entries whose true
/// gradient is (near) zero from dividing by rounding noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Worst entry of an elementwise comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Worst {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

pub fn worst_mismatch(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> Worst {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let mut worst = Worst {
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_error: 0.0,
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let e = relative_error(a, n, floor);
        if e > worst.rel_error || e.is_nan() {
            worst = Worst {
                index: i,
                analytic: a,
                numeric: n,
                rel_error: e,
            };
        }
    }
    worst
}
