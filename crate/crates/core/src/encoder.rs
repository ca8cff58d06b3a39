//! Micro vision transformer with a frozen base and low-rank adapters on the
//! query and value projections of every block.
//!
//! For the selected branch, each block computes
//! `Q = W_Q·x + B_Q·A_Q·x` and `V = W_V·x + B_V·A_V·x`; key and output
//! projections are never adapted.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlugError, Result};
use crate::nn::{gelu, gelu_backward, join, Attention, AttnCache, LayerNorm, Linear, LnCache, LoraPair, Params};
use crate::scalar::Scalar;
use crate::tensor::{add_into, added, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub rank: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 128,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            rank: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PlugError::Config(m.to_string()));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("image_size must be divisible by patch_size");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be divisible by heads");
        }
        if self.embed_dim % 8 != 0 {
            return bad("embed_dim must be divisible by 8");
        }
        if self.blocks == 0 || self.mlp_ratio == 0 || self.rank == 0 {
            return bad("blocks, mlp_ratio and rank must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Parameters in one adapter branch: blocks · 2 projections · 2 matrices · r · d.
    pub fn adapter_params_per_branch(&self) -> usize {
        self.blocks * 2 * 2 * self.rank * self.embed_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Inmodal,
    Amodal,
}

impl Branch {
    /// Short tag used in tensor names (`v` or `a`).
    pub fn tag(self) -> &'static str {
        match self {
            Branch::Inmodal => "v",
            Branch::Amodal => "a",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Inmodal => "inmodal",
            Branch::Amodal => "amodal",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
}

impl<T: Scalar> Params<T> for EncoderBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.ln1.visit(&join(prefix, "ln1"), out);
        self.attn.visit(prefix, out);
        self.ln2.visit(&join(prefix, "ln2"), out);
        out.push((join(prefix, "mlp.w1"), &self.mlp1.w));
        out.push((join(prefix, "mlp.b1"), &self.mlp1.b));
        out.push((join(prefix, "mlp.w2"), &self.mlp2.w));
        out.push((join(prefix, "mlp.b2"), &self.mlp2.b));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.ln1.visit_mut(&join(prefix, "ln1"), out);
        self.attn.visit_mut(prefix, out);
        self.ln2.visit_mut(&join(prefix, "ln2"), out);
        out.push((join(prefix, "mlp.w1"), &mut self.mlp1.w));
        out.push((join(prefix, "mlp.b1"), &mut self.mlp1.b));
        out.push((join(prefix, "mlp.w2"), &mut self.mlp2.w));
        out.push((join(prefix, "mlp.b2"), &mut self.mlp2.b));
    }
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

/// Adapters of one block for one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockAdapters<T> {
    pub q: LoraPair<T>,
    pub v: LoraPair<T>,
}

crate::impl_params!(BlockAdapters { q => "q", v => "v" });

/// One branch's adapter set (every block, Q and V).
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBank<T> {
    pub blocks: Vec<BlockAdapters<T>>,
}

impl<T: Scalar> Params<T> for AdapterBank<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), out);
        }
    }
}

impl<T: Scalar> AdapterBank<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self {
            blocks: (0..cfg.blocks)
                .map(|_| BlockAdapters {
                    q: LoraPair::new(d, d, cfg.rank, rng),
                    v: LoraPair::new(d, d, cfg.rank, rng),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub cfg: EncoderConfig,
    pub patch: Linear<T>,
    pub pos: Tensor<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub neck: LayerNorm<T>,
}

impl<T: Scalar> Params<T> for Encoder<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.patch.visit(&join(prefix, "patch"), out);
        out.push((join(prefix, "pos"), &self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), out);
        }
        self.neck.visit(&join(prefix, "neck"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.patch.visit_mut(&join(prefix, "patch"), out);
        out.push((join(prefix, "pos"), &mut self.pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), out);
        }
        self.neck.visit_mut(&join(prefix, "neck"), out);
    }
}

/// Image embedding tokens, `tokens × embed_dim` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    pub tokens: Vec<T>,
    pub n: usize,
    pub dim: usize,
    pub branch: Option<Branch>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    patches: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    neck: LnCache<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let blocks = (0..cfg.blocks)
            .map(|_| EncoderBlock {
                ln1: LayerNorm::new(d),
                attn: Attention::new(d, cfg.heads, rng),
                ln2: LayerNorm::new(d),
                mlp1: Linear::new(d, d * cfg.mlp_ratio, rng),
                mlp2: Linear::new(d * cfg.mlp_ratio, d, rng),
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            patch: Linear::new(cfg.patch_dim(), d, rng),
            pos: Tensor::randn(&[cfg.tokens(), d], 0.02, rng),
            blocks,
            neck: LayerNorm::new(d),
        }
    }

    /// Rearranges a channel-major `3 × S × S` image into one row per patch
    /// (row-major patch order, `(channel, y, x)` order within a patch).
    pub fn patches(&self, image: &[T]) -> Result<Vec<T>> {
        let s = self.cfg.image_size;
        let p = self.cfg.patch_size;
        let g = self.cfg.grid();
        if image.len() != 3 * s * s {
            return Err(PlugError::ShapeMismatch(format!(
                "expected a 3x{s}x{s} image, got {} values",
                image.len()
            )));
        }
        let pd = self.cfg.patch_dim();
        let mut out = vec![T::zero(); g * g * pd];
        for gy in 0..g {
            for gx in 0..g {
                let row = &mut out[(gy * g + gx) * pd..(gy * g + gx + 1) * pd];
                let mut k = 0;
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            row[k] = image[c * s * s + (gy * p + py) * s + gx * p + px];
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Patch embedding plus positional embedding.
    pub fn patchify(&self, image: &[T]) -> Result<Vec<T>> {
        let patches = self.patches(image)?;
        Ok(self.embed_patches(&patches))
    }

    fn embed_patches(&self, patches: &[T]) -> Vec<T> {
        let mut x = self.patch.forward(patches, self.cfg.tokens());
        add_into(&mut x, self.pos.data());
        x
    }

    pub fn forward(&self, image: &[T], adapters: Option<&AdapterBank<T>>) -> Result<(Vec<T>, EncoderCache<T>)> {
        if let Some(bank) = adapters {
            if bank.blocks.len() != self.blocks.len() {
                return Err(PlugError::ShapeMismatch("adapter bank has the wrong block count".into()));
            }
        }
        let n = self.cfg.tokens();
        let patches = self.patches(image)?;
        let mut x = self.embed_patches(&patches);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let ad = adapters.map(|b| (&b.blocks[i].q, &b.blocks[i].v));
            let (h, c_ln1) = block.ln1.forward(&x, n);
            let (a, c_attn) = block.attn.forward(&h, n, &h, &h, n, ad);
            let x1 = added(&x, &a);
            let (h2, c_ln2) = block.ln2.forward(&x1, n);
            let pre = block.mlp1.forward(&h2, n);
            let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
            let m = block.mlp2.forward(&act, n);
            x = added(&x1, &m);
            caches.push(BlockCache {
                ln1: c_ln1,
                attn: c_attn,
                ln2: c_ln2,
                h2,
                pre,
                act,
            });
        }
        let (out, neck) = self.neck.forward(&x, n);
        Ok((
            out,
            EncoderCache {
                patches,
                blocks: caches,
                neck,
            },
        ))
    }

    /// Back-propagates `d_out` through the encoder. Base gradients are only
    /// accumulated when `grad` is given; adapter gradients only when
    /// `adapter_grad` is given.
    pub fn backward(
        &self,
        cache: &EncoderCache<T>,
        d_out: &[T],
        mut grad: Option<&mut Encoder<T>>,
        adapters: Option<&AdapterBank<T>>,
        mut adapter_grad: Option<&mut AdapterBank<T>>,
    ) {
        let n = self.cfg.tokens();
        let mut dx = self
            .neck
            .backward(&cache.neck, d_out, grad.as_deref_mut().map(|g| &mut g.neck));
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[i];
            let mut gb = grad.as_deref_mut().map(|g| &mut g.blocks[i]);
            let dact = block
                .mlp2
                .backward(&c.act, &dx, n, gb.as_deref_mut().map(|g| &mut g.mlp2));
            let dpre = gelu_backward(&c.pre, &dact);
            let dh2 = block
                .mlp1
                .backward(&c.h2, &dpre, n, gb.as_deref_mut().map(|g| &mut g.mlp1));
            let dln2 = block.ln2.backward(&c.ln2, &dh2, gb.as_deref_mut().map(|g| &mut g.ln2));
            add_into(&mut dx, &dln2);

            let ad = adapters.map(|b| (&b.blocks[i].q, &b.blocks[i].v));
            let adg = adapter_grad.as_deref_mut().map(|g| {
                let b = &mut g.blocks[i];
                (&mut b.q, &mut b.v)
            });
            let (dq, dk, dv) = block
                .attn
                .backward(&c.attn, &dx, gb.as_deref_mut().map(|g| &mut g.attn), ad, adg);
            let mut dh = dq;
            add_into(&mut dh, &dk);
            add_into(&mut dh, &dv);
            let dln1 = block.ln1.backward(&c.ln1, &dh, gb.as_deref_mut().map(|g| &mut g.ln1));
            add_into(&mut dx, &dln1);
        }
        if let Some(g) = grad {
            add_into(g.pos.data_mut(), &dx);
            g.patch.accumulate(&cache.patches, &dx, n);
        }
    }
}
