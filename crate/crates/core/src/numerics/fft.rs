//! Discrete Fourier transforms and FFT-based causal convolution.
//!
//! Power-of-two lengths go through an iterative radix-2 transform. Any other
//! length is mapped onto a zero-padded power-of-two transform with
//! Bluestein's chirp-z identity, so every length is exact without a
//! mixed-radix implementation. All arithmetic is `f64`.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{invalid, Result};

/// Spectrum of a length-N signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpectrum {
    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn amplitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }

    fn to_complex(&self) -> Vec<Complex64> {
        self.re.iter().zip(&self.im).map(|(&r, &i)| Complex64::new(r, i)).collect()
    }
}

pub(crate) fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// In-place radix-2 transform. `buf.len()` must be a power of two.
/// The inverse is unscaled.
pub(crate) fn fft_pow2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let twiddles: Vec<Complex64> = (0..n / 2)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect();
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = twiddles[k * step];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Unscaled DFT of arbitrary length (inverse sign when `inverse`).
pub(crate) fn dft_complex(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = x.len();
    if n.is_power_of_two() {
        let mut buf = x.to_vec();
        fft_pow2(&mut buf, inverse);
        return buf;
    }
    // Bluestein: X[k] = w_k * sum_n (x_n w_n) conj(w_{k-n}), w_n = exp(-i pi n^2 / N)
    let sign = if inverse { 1.0 } else { -1.0 };
    let chirp: Vec<Complex64> = (0..n)
        .map(|i| {
            let sq = (i as u128 * i as u128) % (2 * n as u128);
            Complex64::from_polar(1.0, sign * PI * sq as f64 / n as f64)
        })
        .collect();
    let m = next_pow2(2 * n - 1);
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for i in 0..n {
        a[i] = x[i] * chirp[i];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for i in 1..n {
        b[i] = chirp[i].conj();
        b[m - i] = chirp[i].conj();
    }
    fft_pow2(&mut a, false);
    fft_pow2(&mut b, false);
    for (ai, bi) in a.iter_mut().zip(&b) {
        *ai *= bi;
    }
    fft_pow2(&mut a, true);
    let scale = 1.0 / m as f64;
    (0..n).map(|k| a[k] * scale * chirp[k]).collect()
}

/// `X[k] = sum_n x_n e^{-j 2 pi k n / N}` for any `N >= 1`.
pub fn dft(signal: &[f32]) -> Result<ComplexSpectrum> {
    if signal.is_empty() {
        return invalid("dft of an empty signal");
    }
    let x: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
    let out = dft_complex(&x, false);
    Ok(ComplexSpectrum {
        re: out.iter().map(|c| c.re).collect(),
        im: out.iter().map(|c| c.im).collect(),
    })
}

/// Inverse of [`dft`], returning the real part.
pub fn idft(spectrum: &ComplexSpectrum) -> Result<Vec<f64>> {
    if spectrum.is_empty() {
        return invalid("idft of an empty spectrum");
    }
    if spectrum.re.len() != spectrum.im.len() {
        return invalid("spectrum re/im length mismatch");
    }
    let n = spectrum.len() as f64;
    Ok(dft_complex(&spectrum.to_complex(), true).iter().map(|c| c.re / n).collect())
}

/// Causal linear convolution `y[t] = sum_{s<=t} kernel[s] u[t-s]`, truncated
/// to `u.len()`. Both operands are zero-padded to at least `2N-1` so the
/// circular product never wraps.
pub fn fft_convolve(u: &[f32], kernel: &[f32]) -> Result<Vec<f32>> {
    if u.len() != kernel.len() {
        return invalid(format!(
            "fft_convolve length mismatch: {} vs {}",
            u.len(),
            kernel.len()
        ));
    }
    if u.is_empty() {
        return invalid("fft_convolve of empty input");
    }
    let u: Vec<f64> = u.iter().map(|&v| v as f64).collect();
    let k: Vec<f64> = kernel.iter().map(|&v| v as f64).collect();
    Ok(causal_conv_f64(&u, &k).into_iter().map(|v| v as f32).collect())
}

pub(crate) fn causal_conv_f64(u: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = u.len();
    let m = next_pow2(2 * n - 1);
    let zero = Complex64::new(0.0, 0.0);
    let mut a = vec![zero; m];
    let mut b = vec![zero; m];
    for i in 0..n {
        a[i].re = u[i];
        b[i].re = kernel[i];
    }
    fft_pow2(&mut a, false);
    fft_pow2(&mut b, false);
    for (ai, bi) in a.iter_mut().zip(&b) {
        *ai *= bi;
    }
    fft_pow2(&mut a, true);
    let scale = 1.0 / m as f64;
    a[..n].iter().map(|c| c.re * scale).collect()
}

/// Causal convolution by direct summation, O(N^2).
pub fn direct_causal_convolve(u: &[f32], kernel: &[f32]) -> Result<Vec<f32>> {
    if u.len() != kernel.len() {
        return invalid("direct_causal_convolve length mismatch");
    }
    let n = u.len();
    let mut out = vec![0f32; n];
    for (t, o) in out.iter_mut().enumerate() {
        let mut acc = 0f64;
        for s in 0..=t {
            acc += kernel[s] as f64 * u[t - s] as f64;
        }
        *o = acc as f32;
    }
    Ok(out)
}
