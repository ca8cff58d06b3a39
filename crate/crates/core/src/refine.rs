//! Refine module: a small residual CNN over the image, both coarse mask
//! probabilities and both uncertainty maps, added to the coarse amodal logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlugError, Result};
use crate::impl_params;
use crate::nn::{gelu, gelu_backward, join, sigmoid, Conv1x1, Conv3x3, Params};
use crate::scalar::Scalar;
use crate::tensor::{add_into, added, Tensor};

pub const REFINE_CHANNELS: usize = 7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub channels: usize,
    pub blocks: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { channels: 16, blocks: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<T> {
    pub conv1: Conv3x3<T>,
    pub conv2: Conv3x3<T>,
}

impl_params!(ResBlock { conv1 => "conv1", conv2 => "conv2" });

#[derive(Clone, Debug, PartialEq)]
pub struct RefineNet<T> {
    pub entry: Conv3x3<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub exit: Conv1x1<T>,
}

impl<T: Scalar> Params<T> for RefineNet<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.entry.visit(&join(prefix, "entry"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), out);
        }
        self.exit.visit(&join(prefix, "exit"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.entry.visit_mut(&join(prefix, "entry"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), out);
        }
        self.exit.visit_mut(&join(prefix, "exit"), out);
    }
}

#[derive(Clone, Debug)]
struct ResCache<T> {
    col1: Vec<T>,
    pre1: Vec<T>,
    col2: Vec<T>,
    pre_out: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct RefineCache<T> {
    h: usize,
    w: usize,
    col: Vec<T>,
    pre: Vec<T>,
    blocks: Vec<ResCache<T>>,
    feat: Vec<T>,
}

/// Stacks the refine input: image (3), `σ(m_v)`, `σ(m_a)`, `u_v`, `u_a`.
pub fn refine_input<T: Scalar>(image: &[T], m_v: &[T], m_a: &[T], u_v: &[T], u_a: &[T]) -> Result<Vec<T>> {
    let hw = m_a.len();
    if image.len() != 3 * hw || m_v.len() != hw || u_v.len() != hw || u_a.len() != hw {
        return Err(PlugError::ShapeMismatch("refine inputs disagree in size".into()));
    }
    let mut x = Vec::with_capacity(REFINE_CHANNELS * hw);
    x.extend_from_slice(image);
    x.extend(m_v.iter().map(|&v| sigmoid(v)));
    x.extend(m_a.iter().map(|&v| sigmoid(v)));
    x.extend_from_slice(u_v);
    x.extend_from_slice(u_a);
    Ok(x)
}

impl<T: Scalar> RefineNet<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &RefineConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        Self {
            entry: Conv3x3::new(REFINE_CHANNELS, c, rng),
            blocks: (0..cfg.blocks)
                .map(|_| ResBlock {
                    conv1: Conv3x3::new(c, c, rng),
                    conv2: Conv3x3::new(c, c, rng),
                })
                .collect(),
            exit: Conv1x1::zeroed(c, 1),
        }
    }

    /// Residual logits for a `7 × h × w` input.
    pub fn residual(&self, input: &[T], h: usize, w: usize) -> Result<(Vec<T>, RefineCache<T>)> {
        if input.len() != REFINE_CHANNELS * h * w {
            return Err(PlugError::ShapeMismatch(format!(
                "refine expects 7x{h}x{w} input, got {} values",
                input.len()
            )));
        }
        let (pre, col) = self.entry.forward(input, h, w);
        let mut x: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (pre1, col1) = b.conv1.forward(&x, h, w);
            let a1: Vec<T> = pre1.iter().map(|&v| gelu(v)).collect();
            let (y, col2) = b.conv2.forward(&a1, h, w);
            let pre_out = added(&x, &y);
            x = pre_out.iter().map(|&v| gelu(v)).collect();
            caches.push(ResCache {
                col1,
                pre1,
                col2,
                pre_out,
            });
        }
        let out = self.exit.forward(&x, h * w);
        Ok((
            out,
            RefineCache {
                h,
                w,
                col,
                pre,
                blocks: caches,
                feat: x,
            },
        ))
    }

    /// Refined amodal logits: `m_a` plus the residual.
    pub fn refine(&self, input: &[T], m_a: &[T], h: usize, w: usize) -> Result<(Vec<T>, RefineCache<T>)> {
        let (r, cache) = self.residual(input, h, w)?;
        Ok((added(m_a, &r), cache))
    }

    /// Gradient of the residual with respect to the stacked input.
    pub fn backward(&self, cache: &RefineCache<T>, d_out: &[T], mut grad: Option<&mut RefineNet<T>>) -> Vec<T> {
        let (h, w) = (cache.h, cache.w);
        let mut dx = self
            .exit
            .backward(&cache.feat, d_out, h * w, grad.as_deref_mut().map(|g| &mut g.exit));
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[i];
            let mut gb = grad.as_deref_mut().map(|g| &mut g.blocks[i]);
            let d_pre_out = gelu_backward(&c.pre_out, &dx);
            let d_a1 = b
                .conv2
                .backward(&c.col2, &d_pre_out, h, w, gb.as_deref_mut().map(|g| &mut g.conv2));
            let d_pre1 = gelu_backward(&c.pre1, &d_a1);
            let mut d_in = b.conv1.backward(&c.col1, &d_pre1, h, w, gb.map(|g| &mut g.conv1));
            add_into(&mut d_in, &d_pre_out);
            dx = d_in;
        }
        let d_pre = gelu_backward(&cache.pre, &dx);
        self.entry
            .backward(&cache.col, &d_pre, h, w, grad.map(|g| &mut g.entry))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_weights_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = RefineNet::<f32>::new(&RefineConfig::default(), &mut rng);
        let x = Tensor::<f32>::randn(&[7, 16, 16], 1.0, &mut rng);
        let m = Tensor::<f32>::randn(&[16, 16], 3.0, &mut rng);
        let (out, _) = net.refine(x.data(), m.data(), 16, 16).unwrap();
        assert_eq!(out, m.data());
        assert!(net.refine(&x.data()[1..], m.data(), 16, 16).is_err());
    }

    #[test]
    fn input_channel_order() {
        let hw = 4;
        let img = vec![0.1f64; 3 * hw];
        let x = refine_input(&img, &[0.0; 4], &[100.0; 4], &[0.2; 4], &[0.3; 4]).unwrap();
        assert_eq!(x.len(), 7 * hw);
        assert_eq!(x[3 * hw], 0.5);
        assert!((x[4 * hw] - 1.0).abs() < 1e-12);
        assert_eq!(x[5 * hw], 0.2);
        assert_eq!(x[6 * hw], 0.3);
    }
}
