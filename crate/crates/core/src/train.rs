//! Optimizer, learning-rate schedule and the pretraining / finetuning loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{PlugError, Result};
use crate::metrics::ThresholdSpace;
use crate::model::{AblationFlags, LossParts, ModelConfig, PlugModel, Stage, Target};
use crate::nn::Params;
use crate::scalar::Scalar;
use crate::syndata::sample_seed;
use crate::tensor::Tensor;
use crate::uncertainty::PointLossParams;

const SHUFFLE_STREAM: u64 = 0x5348_5546_0000_0000;
const POINT_STREAM: u64 = 0x504f_494e_0000_0000;
const ATTACH_STREAM: u64 = 0x4154_5443;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_iters: usize,
    pub epochs: usize,
    pub batch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub threshold: f64,
    pub threshold_space: ThresholdSpace,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-3,
            warmup_iters: 250,
            epochs: 50,
            batch: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            threshold: 0.3,
            threshold_space: ThresholdSpace::Prob,
            seed: 0,
            seeds: vec![0, 1, 2],
            flags: AblationFlags::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PlugError::Config(m.to_string()));
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay non-negative");
        }
        if self.threshold_space == ThresholdSpace::Prob && !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("probability threshold must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(samples)
    }
}

/// Learning rate after `step` updates out of `total`: linear warmup to the
/// peak, then linear decay to zero at `total`. Runs shorter than the warmup
/// peak at their midpoint.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total {
        return Err(PlugError::InvalidArgument(format!(
            "step {step} is beyond the {total}-step schedule"
        )));
    }
    let warm = if total <= cfg.warmup_iters {
        total as f64 / 2.0
    } else {
        cfg.warmup_iters as f64
    };
    let (s, t) = (step as f64, total as f64);
    if warm == 0.0 && step == 0 && total > 0 {
        return Ok(cfg.lr_peak);
    }
    Ok(if s <= warm {
        if warm == 0.0 {
            0.0
        } else {
            cfg.lr_peak * s / warm
        }
    } else {
        cfg.lr_peak * (t - s) / (t - warm)
    })
}

/// Decoupled-weight-decay Adam over a fixed list of named tensors.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    names: Vec<String>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    /// Tracks the tensors of `params` whose names satisfy `trainable`.
    pub fn new<P: Params<T>>(params: &P, trainable: impl Fn(&str) -> bool, cfg: &TrainConfig) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        for (n, t) in params.named("") {
            if trainable(&n) {
                names.push(n);
                m.push(Tensor::zeros(t.shape()));
            }
        }
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            names,
            v: m.clone(),
            m,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn step<P: Params<T>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let decay = T::lit(1.0 - lr * self.weight_decay);
        let step = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        let grads = grads.named("");
        let mut k = 0;
        for (gi, (name, p)) in params.named_mut("").into_iter().enumerate() {
            if k >= self.names.len() || self.names[k] != name {
                continue;
            }
            let g = grads[gi].1.data();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *pv *= decay;
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step * *mv / (vv.sqrt() / bc2_sqrt + eps);
            }
            k += 1;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub inmodal: f64,
    pub amodal: f64,
    pub refine: f64,
    pub lr_end: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    pub flags: Option<AblationFlags>,
    pub seed: u64,
    pub samples: usize,
    pub steps: usize,
    pub trainable_params: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub lr_trace: Vec<f64>,
}

/// Crop-space sample converted to the model scalar.
pub struct TargetData<T> {
    pub image: Vec<T>,
    pub visible: Vec<T>,
    pub amodal: Vec<T>,
    pub prompt_box: [f64; 4],
}

impl<T: Scalar> TargetData<T> {
    pub fn from_sample(s: &Sample) -> Self {
        let cast = |v: &[f32]| v.iter().map(|&x| T::lit(f64::from(x))).collect();
        Self {
            image: cast(&s.image),
            visible: cast(&s.visible_f()),
            amodal: cast(&s.amodal_f()),
            prompt_box: s.visible_box,
        }
    }

    pub fn target(&self) -> Target<'_, T> {
        Target {
            image: &self.image,
            prompt_box: self.prompt_box,
            visible: &self.visible,
            amodal: &self.amodal,
        }
    }
}

fn add_grads<T: Scalar>(acc: &mut PlugModel<T>, g: &PlugModel<T>) {
    for ((_, a), (_, b)) in acc.named_mut("").into_iter().zip(g.named("")) {
        for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch AdamW on `samples`.
pub fn run_training<T: Scalar>(
    model: &mut PlugModel<T>,
    samples: &[Sample],
    stage: Stage,
    cfg: &TrainConfig,
    point: &PointLossParams,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(PlugError::InvalidArgument("no training samples".into()));
    }
    let total = cfg.total_steps(samples.len());
    let mut opt = AdamW::new(&*model, |n| stage.trains(n), cfg);
    let mut log = TrainLog {
        stage: match stage {
            Stage::Pretrain => "pretrain".into(),
            Stage::Finetune => "finetune".into(),
        },
        seed,
        samples: samples.len(),
        steps: total,
        trainable_params: model.trainable_param_count(stage),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed ^ SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        for batch in order.chunks(cfg.batch) {
            let scale = T::lit(1.0 / batch.len() as f64);
            let current: &PlugModel<T> = model;
            let results: Vec<Result<(LossParts, PlugModel<T>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let data = TargetData::<T>::from_sample(&samples[i]);
                    let mut g = current.zeros_like();
                    let stream = (step * cfg.batch + j) as u64;
                    let mut prng = ChaCha8Rng::seed_from_u64(sample_seed(seed ^ POINT_STREAM, stream));
                    let parts = current.loss_and_grad(&data.target(), point, stage, &mut prng, Some(&mut g), scale)?;
                    Ok((parts, g))
                })
                .collect();
            let mut grads: Option<PlugModel<T>> = None;
            let mut batch_loss = LossParts::default();
            for r in results {
                let (p, g) = r?;
                batch_loss.inmodal += p.inmodal;
                batch_loss.amodal += p.amodal;
                batch_loss.refine += p.refine;
                batch_loss.total += p.total;
                match grads.as_mut() {
                    Some(acc) => add_grads(acc, &g),
                    None => grads = Some(g),
                }
            }
            let grads = grads.expect("non-empty batch");
            let mean = batch_loss.total / batch.len() as f64;
            let grads_finite = grads.named("").iter().all(|(_, t)| t.is_finite());
            if !mean.is_finite() || !grads_finite {
                return Err(PlugError::Divergence { step, loss: mean });
            }
            if step == 0 {
                log.initial_loss = mean;
            }
            let lr = lr_at(step + 1, total, cfg)?;
            opt.step(model, &grads, lr);
            log.lr_trace.push(lr);
            sums.inmodal += batch_loss.inmodal;
            sums.amodal += batch_loss.amodal;
            sums.refine += batch_loss.refine;
            sums.total += batch_loss.total;
            step += 1;
        }
        let n = samples.len() as f64;
        let e = EpochLog {
            epoch,
            loss: sums.total / n,
            inmodal: sums.inmodal / n,
            amodal: sums.amodal / n,
            refine: sums.refine / n,
            lr_end: *log.lr_trace.last().unwrap_or(&0.0),
        };
        on_epoch(&e);
        log.final_loss = e.loss;
        log.epochs.push(e);
    }
    Ok(log)
}

/// Trains the base model (encoder, prompt encoder, one decoder) on visible
/// masks of unoccluded objects.
pub fn pretrain<T: Scalar>(
    samples: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(PlugModel<T>, TrainLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = PlugModel::new_base(model_cfg, &mut rng)?;
    let log = run_training(&mut model, samples, Stage::Pretrain, cfg, &PointLossParams::default(), seed, on_epoch)?;
    Ok((model, log))
}

/// Attaches the modules selected by `flags` to a pretrained base and trains
/// them with the encoder base frozen. Without `ft` the base is returned untouched.
pub fn finetune<T: Scalar>(
    base: &PlugModel<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
    point: &PointLossParams,
    flags: AblationFlags,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(PlugModel<T>, TrainLog)> {
    let mut model = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, ATTACH_STREAM));
    model.attach(flags, &mut rng);
    if !flags.ft {
        let log = TrainLog {
            stage: "frozen".into(),
            flags: Some(flags),
            seed,
            samples: samples.len(),
            ..Default::default()
        };
        return Ok((model, log));
    }
    let point = if flags.pt {
        point.clone()
    } else {
        PointLossParams { k: 0, ..point.clone() }
    };
    let mut log = run_training(&mut model, samples, Stage::Finetune, cfg, &point, seed, on_epoch)?;
    log.flags = Some(flags);
    Ok((model, log))
}
