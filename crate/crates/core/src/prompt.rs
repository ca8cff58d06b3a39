//! Box prompt encoding: each corner becomes a token built from frozen random
//! Fourier features of its normalized position plus a learned corner-type
//! embedding.

use rand::Rng;

use crate::error::{PlugError, Result};
use crate::impl_params;
use crate::scalar::Scalar;
use crate::syndata::BBox;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoder<T> {
    /// Frozen `2 × D/2` Gaussian frequency matrix.
    pub gauss: Tensor<T>,
    /// Learned `2 × D` embedding for the top-left and bottom-right corners.
    pub corner: Tensor<T>,
}

impl_params!(PromptEncoder { gauss => "gauss", corner => "corner" });

/// Corners of `bbox` as `[(x0/W, y0/H), (x1/W, y1/H)]`.
pub fn normalized_corners(bbox: &BBox, height: usize, width: usize) -> Result<[[f64; 2]; 2]> {
    normalized_box(bbox.as_f64(), height, width)
}

/// As [`normalized_corners`] for a fractional `(x0, y0, x1, y1)` box.
pub fn normalized_box(b: [f64; 4], height: usize, width: usize) -> Result<[[f64; 2]; 2]> {
    let (w, h) = (width as f64, height as f64);
    let [x0, y0, x1, y1] = b;
    if !(0.0 <= x0 && x0 < x1 && x1 <= w && 0.0 <= y0 && y0 < y1 && y1 <= h) {
        return Err(PlugError::InvalidArgument(format!(
            "box {b:?} is degenerate, inverted or outside a {height}x{width} image"
        )));
    }
    Ok([[x0 / w, y0 / h], [x1 / w, y1 / h]])
}

impl<T: Scalar> PromptEncoder<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            gauss: Tensor::randn(&[2, dim / 2], 1.0, rng),
            corner: Tensor::randn(&[2, dim], 0.02, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.corner.shape()[1]
    }

    /// `[sin(2π·(2c−1)·G), cos(2π·(2c−1)·G)]` for a point in `[0,1]²`.
    pub fn fourier(&self, coord: [f64; 2]) -> Vec<T> {
        let half = self.dim() / 2;
        let g = self.gauss.data();
        let (cx, cy) = (T::lit(2.0 * coord[0] - 1.0), T::lit(2.0 * coord[1] - 1.0));
        let tau = T::lit(std::f64::consts::TAU);
        let mut out = vec![T::zero(); 2 * half];
        for j in 0..half {
            let a = tau * (cx * g[j] + cy * g[half + j]);
            out[j] = a.sin();
            out[half + j] = a.cos();
        }
        out
    }

    /// Two prompt tokens (`2 × D`, row-major) for a box on an image of the given size.
    pub fn encode(&self, bbox: &BBox, height: usize, width: usize) -> Result<Vec<T>> {
        self.encode_box(bbox.as_f64(), height, width)
    }

    pub fn encode_box(&self, bbox: [f64; 4], height: usize, width: usize) -> Result<Vec<T>> {
        let corners = normalized_box(bbox, height, width)?;
        let d = self.dim();
        let mut out = Vec::with_capacity(2 * d);
        for (k, c) in corners.iter().enumerate() {
            let f = self.fourier(*c);
            out.extend(f.iter().zip(&self.corner.data()[k * d..(k + 1) * d]).map(|(&a, &b)| a + b));
        }
        Ok(out)
    }

    /// Dense positional encoding of a `grid × grid` token layout (`N × D`).
    pub fn image_pe(&self, grid: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(grid * grid * self.dim());
        for gy in 0..grid {
            for gx in 0..grid {
                let c = [(gx as f64 + 0.5) / grid as f64, (gy as f64 + 0.5) / grid as f64];
                out.extend(self.fourier(c));
            }
        }
        out
    }

    /// Accumulates the corner-embedding gradient; the Fourier matrix is frozen.
    pub fn backward(&self, d_tokens: &[T], grad: &mut PromptEncoder<T>) {
        for (g, &d) in grad.corner.data_mut().iter_mut().zip(d_tokens) {
            *g += d;
        }
    }
}
