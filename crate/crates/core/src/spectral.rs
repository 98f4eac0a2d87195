//! One-sided discrete Fourier transform of real signals along an arbitrary
//! axis, its inverse, and the adjoints used by the autodiff engine.
//!
//! Conventions: the forward transform is unnormalized,
//! `C_k = Σ_n x_n e^{-2πikn/L}` for `k = 0..=L/2`, and the inverse carries the
//! `1/L` factor. The inverse treats the stored half-spectrum as the
//! conjugate-symmetric expansion of a full spectrum and returns the real part,
//! so imaginary parts at DC (and at `L/2` for even `L`) do not contribute.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-spectrum of a real tensor along `axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub real: Tensor,
    pub imag: Tensor,
    pub axis: usize,
    pub original_length: usize,
}

/// Number of stored coefficients for a real signal of length `len`.
pub fn coefficient_count(len: usize) -> usize {
    len / 2 + 1
}

/// Cosine/sine table indexed by `(k * n) mod L`, with exact zeros and ones at
/// the quarter points so that DC and Nyquist rows carry no rounding noise.
#[derive(Debug, Clone)]
pub(crate) struct Twiddles {
    len: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    pub(crate) fn new(len: usize) -> Self {
        let mut cos = Vec::with_capacity(len);
        let mut sin = Vec::with_capacity(len);
        for m in 0..len {
            let (c, s) = if 4 * m == len {
                (0.0, 1.0)
            } else if 2 * m == len {
                (-1.0, 0.0)
            } else if 4 * m == 3 * len {
                (0.0, -1.0)
            } else if m == 0 {
                (1.0, 0.0)
            } else {
                let theta = 2.0 * std::f64::consts::PI * m as f64 / len as f64;
                (theta.cos(), theta.sin())
            };
            cos.push(c);
            sin.push(s);
        }
        Self { len, cos, sin }
    }

    #[inline]
    fn at(&self, k: usize, n: usize) -> (f64, f64) {
        let m = (k * n) % self.len;
        (self.cos[m], self.sin[m])
    }
}

/// `(outer, extent, inner)` view of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Forward half-spectrum kernel. Returns `(real, imag)` laid out with the
/// transformed axis shrunk to `L/2 + 1`.
pub(crate) fn rdft_kernel(shape: &[usize], data: &[f64], axis: usize) -> (Vec<f64>, Vec<f64>) {
    let (outer, len, inner) = split_axis(shape, axis);
    let bins = coefficient_count(len);
    let tw = Twiddles::new(len);
    let mut re = vec![0.0; outer * bins * inner];
    let mut im = vec![0.0; outer * bins * inner];
    let fast = len >= 4 && len.is_power_of_two();
    let mut line = vec![0.0; len];
    let mut scratch = Vec::new();
    for o in 0..outer {
        for i in 0..inner {
            for (n, v) in line.iter_mut().enumerate() {
                *v = data[(o * len + n) * inner + i];
            }
            let out = |k: usize| (o * bins + k) * inner + i;
            if fast {
                radix2_real(&line, &tw, &mut scratch);
                for k in 0..bins {
                    re[out(k)] = scratch[k].0;
                    im[out(k)] = scratch[k].1;
                }
            } else {
                for k in 0..bins {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for (n, &x) in line.iter().enumerate() {
                        let (c, s) = tw.at(k, n);
                        sr += x * c;
                        si -= x * s;
                    }
                    re[out(k)] = sr;
                    im[out(k)] = si;
                }
            }
        }
    }
    (re, im)
}

/// Reference direct-summation transform of one line; used to cross-check the
/// radix-2 path.
pub fn rdft_direct_line(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let len = x.len();
    let tw = Twiddles::new(len);
    (0..coefficient_count(len))
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(sr, si), (n, &v)| {
                let (c, s) = tw.at(k, n);
                (sr + v * c, si - v * s)
            })
        })
        .unzip()
}

/// Radix-2 transform of a real line of power-of-two length, writing all
/// `L` complex bins into `out`.
fn radix2_real(x: &[f64], tw: &Twiddles, out: &mut Vec<(f64, f64)>) {
    let n = x.len();
    out.clear();
    out.extend(x.iter().map(|&v| (v, 0.0)));
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            out.swap(i, j);
        }
    }
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let step = n / size;
        for start in (0..n).step_by(size) {
            for j in 0..half {
                let m = j * step;
                // e^{-2πi m / n}
                let (wr, wi) = (tw.cos[m], -tw.sin[m]);
                let (ar, ai) = out[start + j];
                let (br, bi) = out[start + j + half];
                let (tr, ti) = (br * wr - bi * wi, br * wi + bi * wr);
                out[start + j] = (ar + tr, ai + ti);
                out[start + j + half] = (ar - tr, ai - ti);
            }
        }
        size *= 2;
    }
}

/// Adjoint of [`rdft_kernel`]: maps gradients on `(real, imag)` back to the
/// time-domain input of length `len`.
pub(crate) fn rdft_adjoint(
    spec_shape: &[usize],
    g_re: &[f64],
    g_im: &[f64],
    axis: usize,
    len: usize,
) -> Vec<f64> {
    let (outer, bins, inner) = split_axis(spec_shape, axis);
    let tw = Twiddles::new(len);
    let mut dx = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for i in 0..inner {
            for n in 0..len {
                let mut acc = 0.0;
                for k in 0..bins {
                    let (c, s) = tw.at(k, n);
                    let idx = (o * bins + k) * inner + i;
                    acc += g_re[idx] * c - g_im[idx] * s;
                }
                dx[(o * len + n) * inner + i] = acc;
            }
        }
    }
    dx
}

/// Multiplicity of bin `k` in the two-sided spectrum of a length-`len` signal.
#[inline]
pub(crate) fn bin_weight(k: usize, len: usize) -> f64 {
    if k == 0 || 2 * k == len {
        1.0
    } else {
        2.0
    }
}

/// Inverse half-spectrum kernel producing a real signal of length `len`.
pub(crate) fn irdft_kernel(
    spec_shape: &[usize],
    re: &[f64],
    im: &[f64],
    axis: usize,
    len: usize,
) -> Vec<f64> {
    let (outer, bins, inner) = split_axis(spec_shape, axis);
    let tw = Twiddles::new(len);
    let inv = 1.0 / len as f64;
    let mut x = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for i in 0..inner {
            for n in 0..len {
                let mut acc = 0.0;
                for k in 0..bins {
                    let (c, s) = tw.at(k, n);
                    let idx = (o * bins + k) * inner + i;
                    acc += bin_weight(k, len) * (re[idx] * c - im[idx] * s);
                }
                x[(o * len + n) * inner + i] = acc * inv;
            }
        }
    }
    x
}

/// Adjoint of [`irdft_kernel`].
pub(crate) fn irdft_adjoint(
    out_shape: &[usize],
    g: &[f64],
    axis: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (outer, len, inner) = split_axis(out_shape, axis);
    let bins = coefficient_count(len);
    let tw = Twiddles::new(len);
    let inv = 1.0 / len as f64;
    let mut g_re = vec![0.0; outer * bins * inner];
    let mut g_im = vec![0.0; outer * bins * inner];
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..bins {
                let w = bin_weight(k, len) * inv;
                let (mut ar, mut ai) = (0.0, 0.0);
                for n in 0..len {
                    let (c, s) = tw.at(k, n);
                    let gv = g[(o * len + n) * inner + i];
                    ar += gv * c;
                    ai -= gv * s;
                }
                let idx = (o * bins + k) * inner + i;
                g_re[idx] = w * ar;
                g_im[idx] = w * ai;
            }
        }
    }
    (g_re, g_im)
}

pub(crate) fn spectrum_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = coefficient_count(shape[axis]);
    s
}

/// Half-spectrum of `x` along `axis`.
pub fn rdft(x: &Tensor, axis: usize) -> Result<ComplexSpectrum> {
    check_axis(x.shape(), axis)?;
    let (re, im) = rdft_kernel(x.shape(), x.data(), axis);
    let shape = spectrum_shape(x.shape(), axis);
    Ok(ComplexSpectrum {
        real: Tensor::from_parts(shape.clone(), re),
        imag: Tensor::from_parts(shape, im),
        axis,
        original_length: x.shape()[axis],
    })
}

impl ComplexSpectrum {
    fn check_layout(&self) -> Result<()> {
        check_axis(self.real.shape(), self.axis)?;
        if self.real.shape() != self.imag.shape() {
            return Err(crate::error::shape_mismatch(
                "spectrum",
                self.real.shape(),
                self.imag.shape(),
            ));
        }
        let bins = self.real.shape()[self.axis];
        if self.original_length == 0 || bins != coefficient_count(self.original_length) {
            return Err(Error::Validation(format!(
                "{bins} coefficients cannot describe a signal of length {}",
                self.original_length
            )));
        }
        Ok(())
    }

    /// Largest imaginary magnitude found at the bins that must be real.
    pub fn reality_violation(&self) -> f64 {
        let len = self.original_length;
        let (outer, bins, inner) = split_axis(self.imag.shape(), self.axis);
        let mut worst: f64 = 0.0;
        let mut check = |k: usize| {
            for o in 0..outer {
                for i in 0..inner {
                    worst = worst.max(self.imag.data()[(o * bins + k) * inner + i].abs());
                }
            }
        };
        check(0);
        if len % 2 == 0 {
            check(len / 2);
        }
        worst
    }

    pub fn time_shape(&self) -> Vec<usize> {
        let mut s = self.real.shape().to_vec();
        s[self.axis] = self.original_length;
        s
    }
}

/// Inverse of [`rdft`]. Rejects spectra whose DC (or even-length Nyquist)
/// coefficients carry an imaginary part, since no real signal has one.
pub fn irdft(s: &ComplexSpectrum) -> Result<Tensor> {
    s.check_layout()?;
    let scale = s
        .real
        .data()
        .iter()
        .chain(s.imag.data())
        .fold(1.0_f64, |m, v| m.max(v.abs()));
    let violation = s.reality_violation();
    if violation > 1e-9 * scale {
        return Err(Error::Validation(format!(
            "imaginary part {violation:e} at a self-conjugate bin"
        )));
    }
    Ok(irdft_real_part(s))
}

/// Real part of the inverse of the conjugate-symmetric expansion of `s`.
/// Imaginary parts at self-conjugate bins are discarded instead of rejected.
pub fn irdft_real_part(s: &ComplexSpectrum) -> Tensor {
    let data = irdft_kernel(
        s.real.shape(),
        s.real.data(),
        s.imag.data(),
        s.axis,
        s.original_length,
    );
    Tensor::from_parts(s.time_shape(), data)
}

/// `|C_0|² + [L even]|C_{L/2}|² + 2 Σ_{0<k<⌈L/2⌉} |C_k|²`, summed over every
/// line of the spectrum. Equals `L · Σ x²` for `s = rdft(x)`.
pub fn spectral_energy(s: &ComplexSpectrum) -> f64 {
    let len = s.original_length;
    let (outer, bins, inner) = split_axis(s.real.shape(), s.axis);
    let mut total = 0.0;
    for o in 0..outer {
        for k in 0..bins {
            let w = bin_weight(k, len);
            for i in 0..inner {
                let idx = (o * bins + k) * inner + i;
                total += w * (s.real.data()[idx].powi(2) + s.imag.data()[idx].powi(2));
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn impulse_gives_flat_spectrum() {
        let s = rdft(&line(&[1.0, 0.0, 0.0, 0.0]), 0).unwrap();
        assert_eq!(s.real.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(s.imag.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_is_dc_only() {
        let s = rdft(&line(&[1.0; 4]), 0).unwrap();
        assert_eq!(s.real.data(), &[4.0, 0.0, 0.0]);
        assert_eq!(s.imag.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_tone_lands_in_bin_one() {
        let x: Vec<f64> = (0..8)
            .map(|n| (2.0 * std::f64::consts::PI * n as f64 / 8.0).cos())
            .collect();
        let s = rdft(&line(&x), 0).unwrap();
        for k in 0..5 {
            let want = if k == 1 { 4.0 } else { 0.0 };
            assert!((s.real.data()[k] - want).abs() < 1e-12, "bin {k}");
            assert!(s.imag.data()[k].abs() < 1e-12, "bin {k}");
        }
    }

    #[test]
    fn dc_only_spectrum_inverts_to_ones() {
        let s = ComplexSpectrum {
            real: line(&[5.0, 0.0, 0.0]),
            imag: line(&[0.0, 0.0, 0.0]),
            axis: 0,
            original_length: 5,
        };
        let x = irdft(&s).unwrap();
        assert!(x.max_abs_diff(&line(&[1.0; 5])) < 1e-12);
    }

    #[test]
    fn rejects_imaginary_dc() {
        let s = ComplexSpectrum {
            real: line(&[4.0, 0.0, 0.0]),
            imag: line(&[1.0, 0.0, 0.0]),
            axis: 0,
            original_length: 4,
        };
        assert!(matches!(irdft(&s), Err(Error::Validation(_))));
        assert!(matches!(rdft(&line(&[1.0]), 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn radix2_agrees_with_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [4, 8, 16, 64, 512] {
            let x = Tensor::uniform(&[len], -1.0, 1.0, &mut rng);
            let fast = rdft(&x, 0).unwrap();
            let (re, im) = rdft_direct_line(x.data());
            for k in 0..re.len() {
                assert!((fast.real.data()[k] - re[k]).abs() < 1e-10);
                assert!((fast.imag.data()[k] - im[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn energy_examples() {
        assert_eq!(spectral_energy(&rdft(&line(&[1.0, 0.0, 0.0, 0.0]), 0).unwrap()), 4.0);
        assert_eq!(spectral_energy(&rdft(&line(&[1.0; 4]), 0).unwrap()), 16.0);
    }
}
