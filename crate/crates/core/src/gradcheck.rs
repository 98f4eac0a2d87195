//! Central finite-difference gradients, used as an independent oracle for the
//! autodiff engine.

use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i` of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as input")
}

/// Worst-case mismatch between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub relative: f64,
}

/// Compares two gradients elementwise. Relative error is measured against
/// `max(|a|, |n|, floor)` so that entries whose true value is zero are judged
/// on an absolute scale of `floor` instead of blowing up.
pub fn compare_gradients(analytic: &Tensor, numeric: &Tensor, floor: f64) -> GradMismatch {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let mut worst = GradMismatch {
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        relative: 0.0,
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > worst.relative || i == 0 {
            worst = GradMismatch {
                index: i,
                analytic: a,
                numeric: n,
                relative: rel,
            };
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.7);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-5);
        assert!(g.max_abs_diff(&Tensor::ones(&[2, 3])) < 1e-9);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.5);
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!(g.max_abs_diff(&x.scale(2.0)) < 1e-6);
    }
}
