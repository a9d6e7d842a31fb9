//! Gradient-based explainability maps over the last attention layer.
//!
//! For a score `s`, the raw relevance of token `j` is the ReLU-clipped
//! gradient `∂s/∂A[h, i, j]` averaged over heads `h` and query rows `i`.
//! The class-token column is dropped, the patch columns are reshaped
//! row-major onto the `g × g` grid and min-max normalized.

use std::path::Path;

use serde::Serialize;

use crate::error::{arg, Result};
use crate::real::{dot, norm, Real};
use crate::vit::{EncoderActivations, Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExplainabilityMap<T> {
    /// Side of the patch grid.
    pub grid_size: usize,
    /// `g × g` row-major scores in `[0, 1]`.
    pub grid: Vec<T>,
    /// Per-token relevance before the class token is dropped, length `n`.
    pub raw: Vec<T>,
}

impl<T: Real> ExplainabilityMap<T> {
    /// True when the patch relevance was constant and the grid is all zeros.
    pub fn is_degenerate(&self) -> bool {
        let patches = &self.raw[1..];
        patches.iter().all(|&v| v == patches[0])
    }

    /// Grayscale bytes, `round(255 * value)`.
    pub fn to_gray_bytes(&self) -> Vec<u8> {
        self.grid
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let g = self.grid_size as u32;
        let img = image::GrayImage::from_raw(g, g, self.to_gray_bytes()).expect("grid is g×g");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Rows of the grid as `f64`, for JSON export.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.grid
            .chunks(self.grid_size)
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect()
    }
}

/// `zbar · let`, the score whose attention gradient drives the map.
pub fn score_dot<T: Real>(let_vec: &[T], zbar: &[T]) -> T {
    dot(let_vec, zbar)
}

pub fn score_cos<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return arg("cosine similarity of a zero-norm vector");
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// `out[j] = 1/(h·n) Σ_h Σ_i max(0, grad[h, i, j])`.
pub fn raw_map<T: Real>(grad_attn: &[T], config: &ModelConfig) -> Vec<T> {
    let n = config.tokens();
    let h = config.heads;
    assert_eq!(grad_attn.len(), h * n * n, "attention gradient shape");
    let mut out = vec![T::zero(); n];
    for row in grad_attn.chunks_exact(n) {
        for (o, &g) in out.iter_mut().zip(row) {
            if g > T::zero() {
                *o += g;
            }
        }
    }
    let scale = T::one() / T::from_usize(h * n).unwrap();
    for o in out.iter_mut() {
        *o *= scale;
    }
    out
}

/// Positions of the first minimum and first maximum of `values`.
pub(crate) fn argmin_argmax<T: Real>(values: &[T]) -> (usize, usize) {
    let (mut lo, mut hi) = (0, 0);
    for (i, &v) in values.iter().enumerate() {
        if v < values[lo] {
            lo = i;
        }
        if v > values[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// Drops the class token, reshapes and min-max normalizes. A constant
/// patch vector maps to all zeros.
pub fn finalize_map<T: Real>(raw: &[T], config: &ModelConfig) -> ExplainabilityMap<T> {
    let g = config.grid();
    assert_eq!(raw.len(), config.tokens(), "raw map length");
    let patches = &raw[1..];
    let (lo, hi) = argmin_argmax(patches);
    let (min, max) = (patches[lo], patches[hi]);
    let grid = if max > min {
        let range = max - min;
        patches.iter().map(|&v| (v - min) / range).collect()
    } else {
        vec![T::zero(); g * g]
    };
    ExplainabilityMap {
        grid_size: g,
        grid,
        raw: raw.to_vec(),
    }
}

/// Explainability map of `let_vec` on an encoded image.
pub fn explain<T: Real>(
    model: &Model<T>,
    acts: &EncoderActivations<T>,
    let_vec: &[T],
) -> Result<ExplainabilityMap<T>> {
    let grad = model.tail_vjp(acts, let_vec)?;
    let raw = raw_map(&grad, model.config());
    Ok(finalize_map(&raw, model.config()))
}
