//! The assembled model: frozen encoder with per-branch adapters, box prompt
//! encoder, inmodal and amodal decoders, and the refine module.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderCache, DecoderConfig, MaskDecoder};
use crate::encoder::{AdapterBank, Branch, Encoder, EncoderCache, EncoderConfig};
use crate::error::{PlugError, Result};
use crate::losses::{branch_loss_with, mean_bce, prob_to_logit_grad};
use crate::nn::{sigmoid, Params};
use crate::prompt::PromptEncoder;
use crate::refine::{refine_input, RefineCache, RefineConfig, RefineNet};
use crate::scalar::Scalar;
use crate::tensor::{add_into, Tensor};
use crate::uncertainty::{uncertainty_backward, uncertainty_map, PointLossParams, PointSampler, UncertaintyMap};

pub const FROZEN_PREFIX: &str = "enc.";

/// Ablation switches: fine-tuning, point loss, refine module, parallel branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub ft: bool,
    pub pt: bool,
    pub rm: bool,
    pub pl: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationFlags {
    pub const FULL: Self = Self {
        ft: true,
        pt: true,
        rm: true,
        pl: true,
    };
    pub const NONE: Self = Self {
        ft: false,
        pt: false,
        rm: false,
        pl: false,
    };

    /// Frozen baseline, then FT, +PT, +RM, +PL cumulatively.
    pub fn cumulative_rows() -> [Self; 5] {
        let ft = Self { ft: true, ..Self::NONE };
        let pt = Self { pt: true, ..ft };
        let rm = Self { rm: true, ..pt };
        [Self::NONE, ft, pt, rm, Self::FULL]
    }

    pub fn label(&self) -> String {
        if !self.ft {
            return "frozen".into();
        }
        let mut parts = vec!["FT"];
        for (on, name) in [(self.pt, "PT"), (self.rm, "RM"), (self.pl, "PL")] {
            if on {
                parts.push(name);
            }
        }
        parts.join("+")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub refine: RefineConfig,
}

impl ModelConfig {
    /// Dim-16 configuration used for finite-difference checks.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                image_size: 16,
                patch_size: 4,
                embed_dim: 16,
                blocks: 1,
                heads: 2,
                mlp_ratio: 2,
                rank: 2,
            },
            decoder: DecoderConfig { blocks: 2, mlp_ratio: 2 },
            refine: RefineConfig { channels: 4, blocks: 1 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder.blocks == 0 || self.decoder.mlp_ratio == 0 {
            return Err(PlugError::Config("decoder blocks and mlp_ratio must be positive".into()));
        }
        if self.refine.channels == 0 {
            return Err(PlugError::Config("refine channels must be positive".into()));
        }
        Ok(())
    }
}

/// Which parameters a training stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Encoder, prompt encoder and the amodal-slot decoder on visible masks.
    Pretrain,
    /// Adapters, prompt encoder, decoders and refine; encoder base frozen.
    Finetune,
}

impl Stage {
    pub fn trains(self, name: &str) -> bool {
        if name == "prompt.gauss" {
            return false;
        }
        match self {
            Stage::Pretrain => true,
            Stage::Finetune => !name.starts_with(FROZEN_PREFIX),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlugModel<T> {
    pub cfg: ModelConfig,
    pub encoder: Encoder<T>,
    pub lora_v: Option<AdapterBank<T>>,
    pub lora_a: Option<AdapterBank<T>>,
    pub prompt: PromptEncoder<T>,
    pub dec_v: Option<MaskDecoder<T>>,
    pub dec_a: MaskDecoder<T>,
    pub refine: Option<RefineNet<T>>,
}

impl<T: Scalar> Params<T> for PlugModel<T> {
    fn visit<'a>(&'a self, _prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.encoder.visit("enc", out);
        self.lora_v.visit("lora.v", out);
        self.lora_a.visit("lora.a", out);
        self.prompt.visit("prompt", out);
        self.dec_v.visit("dec.v", out);
        self.dec_a.visit("dec.a", out);
        self.refine.visit("refine", out);
    }

    fn visit_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.encoder.visit_mut("enc", out);
        self.lora_v.visit_mut("lora.v", out);
        self.lora_a.visit_mut("lora.a", out);
        self.prompt.visit_mut("prompt", out);
        self.dec_v.visit_mut("dec.v", out);
        self.dec_a.visit_mut("dec.a", out);
        self.refine.visit_mut("refine", out);
    }
}

/// Inference outputs in crop space.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub size: usize,
    pub inmodal: Option<Vec<T>>,
    pub amodal: Vec<T>,
    pub uncertainty_v: UncertaintyMap<T>,
    pub uncertainty_a: UncertaintyMap<T>,
    pub refined: Vec<T>,
}

/// Supervision for one crop-space sample.
#[derive(Clone, Copy, Debug)]
pub struct Target<'a, T> {
    pub image: &'a [T],
    pub prompt_box: [f64; 4],
    pub visible: &'a [T],
    pub amodal: &'a [T],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub inmodal: f64,
    pub amodal: f64,
    pub refine: f64,
    pub total: f64,
}

struct BranchPass<T> {
    enc: EncoderCache<T>,
    dec: DecoderCache<T>,
    logits: Vec<T>,
}

struct RefinePass<T> {
    cache: RefineCache<T>,
    p_v: Vec<T>,
    p_a: Vec<T>,
}

struct Pass<T> {
    v: Option<BranchPass<T>>,
    a: BranchPass<T>,
    u_v: UncertaintyMap<T>,
    u_a: UncertaintyMap<T>,
    refine: Option<RefinePass<T>>,
    refined: Vec<T>,
}

impl<T: Scalar> PlugModel<T> {
    /// Encoder, prompt encoder and a single decoder, as used for pretraining.
    pub fn new_base<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        let encoder = Encoder::new(e, rng);
        let prompt = PromptEncoder::new(e.embed_dim, rng);
        let dec_a = MaskDecoder::new(e.embed_dim, e.heads, e.grid(), e.image_size, &cfg.decoder, rng);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            lora_v: None,
            lora_a: None,
            prompt,
            dec_v: None,
            dec_a,
            refine: None,
        })
    }

    /// Adds the finetuning modules selected by `flags` to a base model. The
    /// inmodal decoder starts as a copy of the amodal one.
    pub fn attach<R: Rng + ?Sized>(&mut self, flags: AblationFlags, rng: &mut R) {
        if !flags.ft {
            return;
        }
        if flags.pl {
            self.lora_v = Some(AdapterBank::new(&self.cfg.encoder, rng));
            self.dec_v = Some(self.dec_a.clone());
        }
        self.lora_a = Some(AdapterBank::new(&self.cfg.encoder, rng));
        if flags.rm {
            self.refine = Some(RefineNet::new(&self.cfg.refine, rng));
        }
    }

    pub fn new_full<R: Rng + ?Sized>(cfg: &ModelConfig, flags: AblationFlags, rng: &mut R) -> Result<Self> {
        let mut m = Self::new_base(cfg, rng)?;
        m.attach(flags, rng);
        Ok(m)
    }

    pub fn image_size(&self) -> usize {
        self.cfg.encoder.image_size
    }

    pub fn is_dual(&self) -> bool {
        self.dec_v.is_some()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    pub fn adapters(&self, branch: Branch) -> Option<&AdapterBank<T>> {
        match branch {
            Branch::Inmodal => self.lora_v.as_ref(),
            Branch::Amodal => self.lora_a.as_ref(),
        }
    }

    /// Image embedding with the adapters of `branch` applied.
    pub fn encode(&self, image: &[T], branch: Branch) -> Result<Vec<T>> {
        let bank = self
            .adapters(branch)
            .ok_or(PlugError::MissingAdapters(branch.name()))?;
        Ok(self.encoder.forward(image, Some(bank))?.0)
    }

    /// Image embedding of the frozen base (no adapters).
    pub fn encode_base(&self, image: &[T]) -> Result<Vec<T>> {
        Ok(self.encoder.forward(image, None)?.0)
    }

    /// Number of adapter parameters across all present branches.
    pub fn adapter_param_count(&self) -> usize {
        self.lora_v.as_ref().map_or(0, |b| b.param_count()) + self.lora_a.as_ref().map_or(0, |b| b.param_count())
    }

    pub fn trainable_param_count(&self, stage: Stage) -> usize {
        self.named("")
            .iter()
            .filter(|(n, _)| stage.trains(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    fn branch_pass(
        &self,
        image: &[T],
        adapters: Option<&AdapterBank<T>>,
        dec: &MaskDecoder<T>,
        prompt: &[T],
        image_pe: &[T],
    ) -> Result<BranchPass<T>> {
        let (emb, enc) = self.encoder.forward(image, adapters)?;
        let (logits, dec) = dec.forward(&emb, prompt, image_pe)?;
        Ok(BranchPass { enc, dec, logits })
    }

    fn pass(&self, image: &[T], prompt_box: [f64; 4], eps: usize) -> Result<Pass<T>> {
        let s = self.image_size();
        let prompt = self.prompt.encode_box(prompt_box, s, s)?;
        let image_pe = self.prompt.image_pe(self.cfg.encoder.grid());
        let a = self.branch_pass(image, self.lora_a.as_ref(), &self.dec_a, &prompt, &image_pe)?;
        let v = match &self.dec_v {
            Some(dec) => Some(self.branch_pass(image, self.lora_v.as_ref(), dec, &prompt, &image_pe)?),
            None => None,
        };
        let m_v = v.as_ref().map_or(&a.logits, |b| &b.logits);
        let p_v: Vec<T> = m_v.iter().map(|&x| sigmoid(x)).collect();
        let p_a: Vec<T> = a.logits.iter().map(|&x| sigmoid(x)).collect();
        let u_v = uncertainty_map(&p_v, s, s, eps)?;
        let u_a = uncertainty_map(&p_a, s, s, eps)?;
        let (refine, refined) = match &self.refine {
            Some(net) => {
                let input = refine_input(image, m_v, &a.logits, &u_v.values, &u_a.values)?;
                let (out, cache) = net.refine(&input, &a.logits, s, s)?;
                (Some(RefinePass { cache, p_v, p_a }), out)
            }
            None => (None, a.logits.clone()),
        };
        Ok(Pass {
            v,
            a,
            u_v,
            u_a,
            refine,
            refined,
        })
    }

    /// Coarse and refined logits for a crop-space image and prompt box.
    pub fn forward(&self, image: &[T], prompt_box: [f64; 4], eps: usize) -> Result<Prediction<T>> {
        let p = self.pass(image, prompt_box, eps)?;
        Ok(Prediction {
            size: self.image_size(),
            inmodal: p.v.map(|b| b.logits),
            amodal: p.a.logits,
            uncertainty_v: p.u_v,
            uncertainty_a: p.u_a,
            refined: p.refined,
        })
    }

    /// Loss on one sample; when `grads` is given, adds `scale ·` its gradient
    /// for every parameter the stage trains.
    pub fn loss_and_grad<S: PointSampler<T> + ?Sized>(
        &self,
        target: &Target<'_, T>,
        point: &PointLossParams,
        stage: Stage,
        sampler: &mut S,
        grads: Option<&mut PlugModel<T>>,
        scale: T,
    ) -> Result<LossParts> {
        let s = self.image_size();
        let hw = s * s;
        if target.visible.len() != hw || target.amodal.len() != hw {
            return Err(PlugError::ShapeMismatch("target masks do not match the model size".into()));
        }
        let pass = self.pass(target.image, target.prompt_box, point.eps)?;
        let mut parts = LossParts::default();
        let mut dm_a;
        let mut dm_v = None;
        match stage {
            Stage::Pretrain => {
                let (l, d) = mean_bce(&pass.a.logits, target.visible);
                parts.amodal = l.as_f64();
                dm_a = d;
            }
            Stage::Finetune => {
                if let Some(v) = &pass.v {
                    let (l, d) = branch_loss_with(&v.logits, target.visible, s, s, point, Branch::Inmodal, sampler)?;
                    parts.inmodal = l.total.as_f64();
                    dm_v = Some(d);
                }
                let (l, d) = branch_loss_with(&pass.a.logits, target.amodal, s, s, point, Branch::Amodal, sampler)?;
                parts.amodal = l.total.as_f64();
                dm_a = d;
            }
        }
        let mut d_refine = None;
        if let (Some(rp), Stage::Finetune) = (&pass.refine, stage) {
            let (l, d) = mean_bce(&pass.refined, target.amodal);
            parts.refine = l.as_f64();
            d_refine = Some((rp, d));
        }
        parts.total = parts.inmodal + parts.amodal + parts.refine;

        let Some(grads) = grads else {
            return Ok(parts);
        };
        if let Some((rp, d)) = d_refine {
            add_into(&mut dm_a, &d);
            let net = self.refine.as_ref().expect("refine pass without refine module");
            let d_in = net.backward(&rp.cache, &d, grads.refine.as_mut());
            let ch = |c: usize| &d_in[c * hw..(c + 1) * hw];
            let dp_v: Vec<T> = ch(3).to_vec();
            let mut dp_a: Vec<T> = ch(4).to_vec();
            let mut du_v = uncertainty_backward(&rp.p_v, s, s, point.eps, ch(5));
            let du_a = uncertainty_backward(&rp.p_a, s, s, point.eps, ch(6));
            add_into(&mut du_v, &dp_v);
            add_into(&mut dp_a, &du_a);
            // channel 3 holds σ(m_a) as well when there is no inmodal branch
            let m_v = pass.v.as_ref().map_or(&pass.a.logits, |b| &b.logits);
            let dv_logits = prob_to_logit_grad(m_v, &du_v);
            add_into(&mut dm_a, &prob_to_logit_grad(&pass.a.logits, &dp_a));
            match dm_v.as_mut() {
                Some(dv) => add_into(dv, &dv_logits),
                None => add_into(&mut dm_a, &dv_logits),
            }
        }
        dm_a.iter_mut().for_each(|v| *v *= scale);
        if let Some(dv) = dm_v.as_mut() {
            dv.iter_mut().for_each(|v| *v *= scale);
        }

        let PlugModel {
            encoder: g_enc,
            lora_v: g_lv,
            lora_a: g_la,
            prompt: g_prompt,
            dec_v: g_dv,
            dec_a: g_da,
            ..
        } = grads;
        let train_base = stage == Stage::Pretrain;
        let mut d_prompt = vec![T::zero(); 2 * self.cfg.encoder.embed_dim];
        let mut backprop = |bp: &BranchPass<T>,
                            dm: &[T],
                            dec: &MaskDecoder<T>,
                            g_dec: Option<&mut MaskDecoder<T>>,
                            bank: Option<&AdapterBank<T>>,
                            g_bank: Option<&mut AdapterBank<T>>,
                            g_enc: Option<&mut Encoder<T>>| {
            let (d_emb, dp) = dec.backward(&bp.dec, dm, g_dec);
            add_into(&mut d_prompt, &dp);
            if g_enc.is_some() || bank.is_some() {
                self.encoder.backward(&bp.enc, &d_emb, g_enc, bank, g_bank);
            }
        };
        backprop(
            &pass.a,
            &dm_a,
            &self.dec_a,
            Some(g_da),
            self.lora_a.as_ref(),
            g_la.as_mut(),
            if train_base { Some(&mut *g_enc) } else { None },
        );
        if let (Some(bp), Some(dv), Some(dec)) = (&pass.v, &dm_v, &self.dec_v) {
            backprop(
                bp,
                dv,
                dec,
                g_dv.as_mut(),
                self.lora_v.as_ref(),
                g_lv.as_mut(),
                if train_base { Some(&mut *g_enc) } else { None },
            );
        }
        self.prompt.backward(&d_prompt, g_prompt);
        Ok(parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_rows_differ_by_one_flag() {
        let rows = AblationFlags::cumulative_rows();
        assert_eq!(rows.len(), 5);
        let on = |f: &AblationFlags| [f.ft, f.pt, f.rm, f.pl].iter().filter(|&&b| b).count();
        for w in rows.windows(2) {
            assert_eq!(on(&w[1]), on(&w[0]) + 1);
        }
        assert_eq!(rows[4].label(), "FT+PT+RM+PL");
        assert_eq!(rows[0].label(), "frozen");
    }

    #[test]
    fn tensor_names_follow_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = PlugModel::<f32>::new_full(&ModelConfig::toy(), AblationFlags::FULL, &mut rng).unwrap();
        let names: Vec<String> = m.named("").into_iter().map(|(n, _)| n).collect();
        for n in ["enc.block0.wq", "lora.v.block0.q.A", "lora.a.block0.v.B", "prompt.corner", "dec.v.mask_token", "dec.a.hyper.w", "refine.exit.w"] {
            assert!(names.iter().any(|x| x == n), "{n}");
        }
        let first_other = names.iter().position(|n| !n.starts_with(FROZEN_PREFIX)).unwrap();
        assert!(names[first_other..].iter().all(|n| !n.starts_with(FROZEN_PREFIX)));
    }

    #[test]
    fn missing_adapters_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = PlugModel::<f32>::new_base(&ModelConfig::toy(), &mut rng).unwrap();
        let img = vec![0.0; 3 * 16 * 16];
        assert!(matches!(m.encode(&img, Branch::Amodal), Err(PlugError::MissingAdapters(_))));
        assert!(m.encode_base(&img).is_ok());
    }

    #[test]
    fn single_branch_halves_adapter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig::default();
        let full = PlugModel::<f32>::new_full(&cfg, AblationFlags::FULL, &mut rng).unwrap();
        let single = PlugModel::<f32>::new_full(&cfg, AblationFlags { pl: false, ..AblationFlags::FULL }, &mut rng).unwrap();
        assert_eq!(full.adapter_param_count(), 4 * 2 * 2 * 2 * 4 * 128);
        assert_eq!(single.adapter_param_count() * 2, full.adapter_param_count());
    }
}
