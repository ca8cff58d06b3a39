//! Mask decoder: one mask token and the prompt tokens attend to the image
//! embedding through two-way attention blocks; the upsampled image features
//! are dotted with a projection of the mask token to give per-pixel logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlugError, Result};
use crate::impl_params;
use crate::nn::{gelu, gelu_backward, join, Attention, AttnCache, Bilinear, LayerNorm, Linear, LnCache, Params, TConv2x2};
use crate::scalar::Scalar;
use crate::tensor::{add_into, added, mm, mm_tn_acc, transpose, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub blocks: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { blocks: 2, mlp_ratio: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock<T> {
    pub self_attn: Attention<T>,
    pub norm1: LayerNorm<T>,
    pub cross_t2i: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
    pub norm3: LayerNorm<T>,
    pub cross_i2t: Attention<T>,
    pub norm4: LayerNorm<T>,
}

impl_params!(DecoderBlock {
    self_attn => "self_attn",
    norm1 => "norm1",
    cross_t2i => "cross_t2i",
    norm2 => "norm2",
    mlp1 => "mlp1",
    mlp2 => "mlp2",
    norm3 => "norm3",
    cross_i2t => "cross_i2t",
    norm4 => "norm4",
});

#[derive(Clone, Debug, PartialEq)]
pub struct MaskDecoder<T> {
    pub mask_token: Tensor<T>,
    pub blocks: Vec<DecoderBlock<T>>,
    pub final_attn: Attention<T>,
    pub norm_final: LayerNorm<T>,
    pub up1: TConv2x2<T>,
    pub up2: TConv2x2<T>,
    pub hyper: Linear<T>,
    grid: usize,
    image_size: usize,
}

impl<T: Scalar> Params<T> for MaskDecoder<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "mask_token"), &self.mask_token));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), out);
        }
        self.final_attn.visit(&join(prefix, "final_attn"), out);
        self.norm_final.visit(&join(prefix, "norm_final"), out);
        self.up1.visit(&join(prefix, "up1"), out);
        self.up2.visit(&join(prefix, "up2"), out);
        self.hyper.visit(&join(prefix, "hyper"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "mask_token"), &mut self.mask_token));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), out);
        }
        self.final_attn.visit_mut(&join(prefix, "final_attn"), out);
        self.norm_final.visit_mut(&join(prefix, "norm_final"), out);
        self.up1.visit_mut(&join(prefix, "up1"), out);
        self.up2.visit_mut(&join(prefix, "up2"), out);
        self.hyper.visit_mut(&join(prefix, "hyper"), out);
    }
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    sa: AttnCache<T>,
    n1: LnCache<T>,
    t2i: AttnCache<T>,
    n2: LnCache<T>,
    mlp_in: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
    n3: LnCache<T>,
    i2t: AttnCache<T>,
    n4: LnCache<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    blocks: Vec<BlockCache<T>>,
    fin: AttnCache<T>,
    nf: LnCache<T>,
    mask_out: Vec<T>,
    hyper: Vec<T>,
    feat: Vec<T>,
    pre1: Vec<T>,
    act1: Vec<T>,
    pre2: Vec<T>,
    act2: Vec<T>,
}

impl<T: Scalar> MaskDecoder<T> {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        heads: usize,
        grid: usize,
        image_size: usize,
        cfg: &DecoderConfig,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..cfg.blocks)
            .map(|_| DecoderBlock {
                self_attn: Attention::new(dim, heads, rng),
                norm1: LayerNorm::new(dim),
                cross_t2i: Attention::new(dim, heads, rng),
                norm2: LayerNorm::new(dim),
                mlp1: Linear::new(dim, dim * cfg.mlp_ratio, rng),
                mlp2: Linear::new(dim * cfg.mlp_ratio, dim, rng),
                norm3: LayerNorm::new(dim),
                cross_i2t: Attention::new(dim, heads, rng),
                norm4: LayerNorm::new(dim),
            })
            .collect();
        Self {
            mask_token: Tensor::randn(&[1, dim], 0.02, rng),
            blocks,
            final_attn: Attention::new(dim, heads, rng),
            norm_final: LayerNorm::new(dim),
            up1: TConv2x2::new(dim, dim / 4, rng),
            up2: TConv2x2::new(dim / 4, dim / 8, rng),
            hyper: Linear::new(dim, dim / 8, rng),
            grid,
            image_size,
        }
    }

    pub fn dim(&self) -> usize {
        self.mask_token.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    fn resize(&self) -> Bilinear {
        let s = 4 * self.grid;
        Bilinear::new(s, s, self.image_size, self.image_size)
    }

    /// Decodes `image_size²` mask logits from image embeddings `emb`
    /// (`N × D`), prompt tokens (`2 × D`) and the image positional encoding.
    pub fn forward(&self, emb: &[T], prompt: &[T], image_pe: &[T]) -> Result<(Vec<T>, DecoderCache<T>)> {
        let d = self.dim();
        let n = self.tokens();
        if emb.len() != n * d || prompt.len() != 2 * d || image_pe.len() != n * d {
            return Err(PlugError::ShapeMismatch(format!(
                "decoder expects {n}x{d} embeddings and 2x{d} prompt tokens, got {} and {}",
                emb.len(),
                prompt.len()
            )));
        }
        let nt = 3;
        let mut qpe = self.mask_token.data().to_vec();
        qpe.extend_from_slice(prompt);
        let mut queries = qpe.clone();
        let mut keys = emb.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let qin = added(&queries, &qpe);
            let (a, sa) = b.self_attn.forward(&qin, nt, &qin, &queries, nt, None);
            let (q1, n1) = b.norm1.forward(&added(&queries, &a), nt);

            let qin = added(&q1, &qpe);
            let kin = added(&keys, image_pe);
            let (a, t2i) = b.cross_t2i.forward(&qin, nt, &kin, &keys, n, None);
            let (q2, n2) = b.norm2.forward(&added(&q1, &a), nt);

            let pre = b.mlp1.forward(&q2, nt);
            let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
            let m = b.mlp2.forward(&act, nt);
            let (q3, n3) = b.norm3.forward(&added(&q2, &m), nt);

            let qin = added(&q3, &qpe);
            let (a, i2t) = b.cross_i2t.forward(&kin, n, &qin, &q3, nt, None);
            let (k4, n4) = b.norm4.forward(&added(&keys, &a), n);

            caches.push(BlockCache {
                sa,
                n1,
                t2i,
                n2,
                mlp_in: q2,
                pre,
                act,
                n3,
                i2t,
                n4,
            });
            queries = q3;
            keys = k4;
        }
        let qin = added(&queries, &qpe);
        let kin = added(&keys, image_pe);
        let (a, fin) = self.final_attn.forward(&qin, nt, &kin, &keys, n, None);
        let (qf, nf) = self.norm_final.forward(&added(&queries, &a), nt);

        let mask_out = qf[..d].to_vec();
        let hyper = self.hyper.forward(&mask_out, 1);
        let g = self.grid;
        let feat = transpose(&keys, n, d);
        let pre1 = self.up1.forward(&feat, g, g);
        let act1: Vec<T> = pre1.iter().map(|&v| gelu(v)).collect();
        let pre2 = self.up2.forward(&act1, 2 * g, 2 * g);
        let act2: Vec<T> = pre2.iter().map(|&v| gelu(v)).collect();
        let s = 4 * g;
        let low = mm(&hyper, 1, d / 8, &act2, s * s);
        let logits = self.resize().forward(&low);
        Ok((
            logits,
            DecoderCache {
                blocks: caches,
                fin,
                nf,
                mask_out,
                hyper,
                feat,
                pre1,
                act1,
                pre2,
                act2,
            },
        ))
    }

    /// Returns gradients with respect to the image embeddings and the prompt tokens.
    pub fn backward(
        &self,
        cache: &DecoderCache<T>,
        d_logits: &[T],
        mut grad: Option<&mut MaskDecoder<T>>,
    ) -> (Vec<T>, Vec<T>) {
        let d = self.dim();
        let n = self.tokens();
        let nt = 3;
        let g = self.grid;
        let s = 4 * g;
        let c8 = d / 8;

        let d_low = self.resize().adjoint(d_logits);
        // low = hyper · act2
        let d_hyper = mm(&d_low, 1, s * s, &transpose(&cache.act2, c8, s * s), c8);
        let mut d_act2 = vec![T::zero(); c8 * s * s];
        mm_tn_acc(&cache.hyper, 1, c8, &d_low, s * s, &mut d_act2);
        let d_pre2 = gelu_backward(&cache.pre2, &d_act2);
        let d_act1 = self
            .up2
            .backward(&cache.act1, &d_pre2, 2 * g, 2 * g, grad.as_deref_mut().map(|m| &mut m.up2));
        let d_pre1 = gelu_backward(&cache.pre1, &d_act1);
        let d_feat = self
            .up1
            .backward(&cache.feat, &d_pre1, g, g, grad.as_deref_mut().map(|m| &mut m.up1));
        let mut d_keys = transpose(&d_feat, d, n);

        let d_mask_out = self
            .hyper
            .backward(&cache.mask_out, &d_hyper, 1, grad.as_deref_mut().map(|m| &mut m.hyper));
        let mut d_qf = vec![T::zero(); nt * d];
        d_qf[..d].copy_from_slice(&d_mask_out);

        let mut d_qpe = vec![T::zero(); nt * d];
        // final token-to-image attention
        let dr = self
            .norm_final
            .backward(&cache.nf, &d_qf, grad.as_deref_mut().map(|m| &mut m.norm_final));
        let (dxq, dxk, dxv) =
            self.final_attn
                .backward(&cache.fin, &dr, grad.as_deref_mut().map(|m| &mut m.final_attn), None, None);
        let mut d_q = dr;
        add_into(&mut d_q, &dxq);
        add_into(&mut d_qpe, &dxq);
        add_into(&mut d_keys, &dxk);
        add_into(&mut d_keys, &dxv);

        for (i, b) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[i];
            let mut gb = grad.as_deref_mut().map(|m| &mut m.blocks[i]);

            // image-to-token attention
            let dr4 = b.norm4.backward(&c.n4, &d_keys, gb.as_deref_mut().map(|m| &mut m.norm4));
            let (dxq, dxk, dxv) =
                b.cross_i2t
                    .backward(&c.i2t, &dr4, gb.as_deref_mut().map(|m| &mut m.cross_i2t), None, None);
            let mut dk = dr4;
            add_into(&mut dk, &dxq);
            add_into(&mut d_q, &dxk);
            add_into(&mut d_q, &dxv);
            add_into(&mut d_qpe, &dxk);

            // MLP
            let dr3 = b.norm3.backward(&c.n3, &d_q, gb.as_deref_mut().map(|m| &mut m.norm3));
            let d_act = b.mlp2.backward(&c.act, &dr3, nt, gb.as_deref_mut().map(|m| &mut m.mlp2));
            let d_pre = gelu_backward(&c.pre, &d_act);
            let mut dq2 = b.mlp1.backward(&c.mlp_in, &d_pre, nt, gb.as_deref_mut().map(|m| &mut m.mlp1));
            add_into(&mut dq2, &dr3);

            // token-to-image attention
            let dr2 = b.norm2.backward(&c.n2, &dq2, gb.as_deref_mut().map(|m| &mut m.norm2));
            let (dxq, dxk, dxv) =
                b.cross_t2i
                    .backward(&c.t2i, &dr2, gb.as_deref_mut().map(|m| &mut m.cross_t2i), None, None);
            let mut dq1 = dr2;
            add_into(&mut dq1, &dxq);
            add_into(&mut d_qpe, &dxq);
            add_into(&mut dk, &dxk);
            add_into(&mut dk, &dxv);

            // self attention
            let dr1 = b.norm1.backward(&c.n1, &dq1, gb.as_deref_mut().map(|m| &mut m.norm1));
            let (dxq, dxk, dxv) =
                b.self_attn
                    .backward(&c.sa, &dr1, gb.as_deref_mut().map(|m| &mut m.self_attn), None, None);
            let mut d_qin = dxq;
            add_into(&mut d_qin, &dxk);
            let mut dq0 = dr1;
            add_into(&mut dq0, &dxv);
            add_into(&mut dq0, &d_qin);
            add_into(&mut d_qpe, &d_qin);

            d_q = dq0;
            d_keys = dk;
        }
        add_into(&mut d_q, &d_qpe);
        if let Some(m) = grad {
            add_into(m.mask_token.data_mut(), &d_q[..d]);
        }
        (d_keys, d_q[d..].to_vec())
    }
}
