//! Tensor storage, FFTs, the differentiation tape, and the scalar helpers
//! the rest of the crate builds on.

pub mod check;
pub mod fft;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use check::finite_diff_check;
pub use fft::{dft, direct_causal_convolve, fft_convolve, idft, ComplexSpectrum};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{invalid, Result};

/// Epsilon inside the RMS root.
pub const RMS_EPS: f64 = 1e-8;

/// `out[i] = scale[i] * x[i] / sqrt(mean(x^2) + 1e-8)`
pub fn rms_norm(x: &[f32], scale: &[f32]) -> Result<Vec<f32>> {
    if x.len() != scale.len() {
        return invalid(format!("rms_norm: {} values vs {} scales", x.len(), scale.len()));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let ms = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    Ok(x.iter().zip(scale).map(|(&v, &s)| (s as f64 * v as f64 * inv) as f32).collect())
}

/// `-log softmax(logits)[target]`, computed with max subtraction.
pub fn softmax_cross_entropy(logits: &[f32], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return invalid(format!("target {target} out of range for {} logits", logits.len()));
    }
    let row: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let (lse, _) = tape::log_softmax_probs(&row);
    Ok((lse - row[target]).max(0.0))
}
