use plug_core::checkpoint::frozen_base_hash;
use plug_core::data::{samples_from_scenes, Sample};
use plug_core::encoder::Branch;
use plug_core::metrics::{evaluate, EvalOptions, PromptSource};
use plug_core::model::{AblationFlags, ModelConfig, PlugModel, Stage, Target};
use plug_core::nn::Params;
use plug_core::syndata::{generate_split, GeneratorConfig, Split};
use plug_core::train::{finetune, pretrain, TargetData, TrainConfig};
use plug_core::uncertainty::{PointCache, PointLossParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_samples(num: usize, seed: u64, split: Split) -> Vec<Sample> {
    let scenes = generate_split(num, seed, &GeneratorConfig::for_split(split)).unwrap();
    samples_from_scenes(&scenes, ModelConfig::toy().encoder.image_size).unwrap()
}

fn short_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch: 4,
        warmup_iters: 2,
        ..TrainConfig::default()
    }
}

fn toy_point() -> PointLossParams {
    PointLossParams {
        eps: 2,
        k: 8,
        ..PointLossParams::default()
    }
}

fn randomize<T: plug_core::scalar::Scalar>(m: &mut PlugModel<T>, prefix: &str, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in m.named_mut("") {
        if name.starts_with(prefix) {
            for v in t.data_mut() {
                *v = T::lit(rng.gen_range(-scale..scale));
            }
        }
    }
}

fn grads_of(model: &PlugModel<f64>, target: &Target<'_, f64>, point: &PointLossParams, seed: u64) -> PlugModel<f64> {
    let mut g = model.zeros_like();
    let mut sampler = PointCache::new(ChaCha8Rng::seed_from_u64(seed));
    model
        .loss_and_grad(target, point, Stage::Finetune, &mut sampler, Some(&mut g), 1.0)
        .unwrap();
    g
}

fn max_abs(m: &PlugModel<f64>, prefix: &str) -> f64 {
    m.named("")
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
}

fn toy_model(flags: AblationFlags, seed: u64) -> PlugModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = PlugModel::<f64>::new_full(&ModelConfig::toy(), flags, &mut rng).unwrap();
    randomize(&mut m, "lora", 0.3, seed + 1);
    m
}

#[test]
fn branches_only_see_their_own_mask() {
    let flags = AblationFlags { rm: false, ..AblationFlags::FULL };
    let model = toy_model(flags, 3);
    let s = &toy_samples(1, 11, Split::Train)[0];
    let data = TargetData::<f64>::from_sample(s);
    let point = PointLossParams { k: 0, ..toy_point() };
    let base = grads_of(&model, &data.target(), &point, 0);

    let flipped: Vec<f64> = data.amodal.iter().map(|v| 1.0 - v).collect();
    let t = Target { amodal: &flipped, ..data.target() };
    let g = grads_of(&model, &t, &point, 0);
    for (a, b) in base.named("").iter().zip(g.named("")) {
        if a.0.starts_with("lora.v") || a.0.starts_with("dec.v") {
            assert_eq!(a.1.data(), b.1.data(), "{}", a.0);
        }
    }

    let flipped: Vec<f64> = data.visible.iter().map(|v| 1.0 - v).collect();
    let t = Target { visible: &flipped, ..data.target() };
    let g = grads_of(&model, &t, &point, 0);
    for (a, b) in base.named("").iter().zip(g.named("")) {
        if a.0.starts_with("lora.a") || a.0.starts_with("dec.a") {
            assert_eq!(a.1.data(), b.1.data(), "{}", a.0);
        }
    }
}

#[test]
fn decoders_start_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = PlugModel::<f32>::new_full(&ModelConfig::toy(), AblationFlags::FULL, &mut rng).unwrap();
    assert_eq!(m.dec_v.as_ref().unwrap(), &m.dec_a);
    let img = vec![0.25f32; 3 * 16 * 16];
    let p = m.forward(&img, [2.0, 3.0, 12.0, 14.0], 3).unwrap();
    assert_eq!(p.inmodal.unwrap(), p.amodal);
}

#[test]
fn refine_loss_reaches_both_branches() {
    let s = &toy_samples(1, 5, Split::Train)[0];
    let data = TargetData::<f64>::from_sample(s);
    let point = PointLossParams { k: 0, ..toy_point() };
    let mut with = toy_model(AblationFlags::FULL, 7);
    randomize(&mut with, "refine.exit", 0.5, 9);
    let mut without = with.clone();
    without.refine = None;

    let g_with = grads_of(&with, &data.target(), &point, 0);
    let g_without = grads_of(&without, &data.target(), &point, 0);
    for prefix in ["dec.v", "dec.a", "lora.v", "lora.a", "prompt.corner"] {
        let differs = g_with
            .named("")
            .iter()
            .zip(g_without.named(""))
            .filter(|(a, _)| a.0.starts_with(prefix))
            .any(|(a, b)| a.1.data() != b.1.data());
        assert!(differs, "refine loss does not reach {prefix}");
    }
    assert!(max_abs(&g_with, "refine.entry") > 0.0);
}

#[test]
fn prompt_parameters_receive_gradient() {
    let s = &toy_samples(1, 8, Split::Train)[0];
    let data = TargetData::<f64>::from_sample(s);
    let g = grads_of(&toy_model(AblationFlags::FULL, 1), &data.target(), &toy_point(), 2);
    assert!(max_abs(&g, "prompt.corner") > 0.0);
    assert_eq!(max_abs(&g, "prompt.gauss"), 0.0);
    assert_eq!(max_abs(&g, "enc."), 0.0);
}

#[test]
fn zero_b_blocks_the_a_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = PlugModel::<f64>::new_full(&ModelConfig::toy(), AblationFlags::FULL, &mut rng).unwrap();
    let s = &toy_samples(1, 4, Split::Train)[0];
    let data = TargetData::<f64>::from_sample(s);
    let g = grads_of(&m, &data.target(), &toy_point(), 0);
    for (name, t) in g.named("") {
        if name.starts_with("lora") && name.ends_with(".A") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    for bank in ["lora.v", "lora.a"] {
        let b_max = g
            .named("")
            .iter()
            .filter(|(n, _)| n.starts_with(bank) && n.ends_with(".B"))
            .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
            .fold(0.0, f64::max);
        assert!(b_max > 0.0, "{bank}");
    }
}

#[test]
fn without_refine_the_output_is_the_coarse_mask() {
    let m = toy_model(AblationFlags { rm: false, ..AblationFlags::FULL }, 2);
    let s = &toy_samples(1, 2, Split::Test)[0];
    let img: Vec<f64> = s.image.iter().map(|&v| f64::from(v)).collect();
    let p = m.forward(&img, s.visible_box, 3).unwrap();
    assert_eq!(p.refined, p.amodal);
}

#[test]
fn single_branch_drops_inmodal_modules() {
    let m = toy_model(AblationFlags { pl: false, ..AblationFlags::FULL }, 2);
    assert!(m.lora_v.is_none() && m.dec_v.is_none());
    assert!(m.adapters(Branch::Amodal).is_some());
    let full = toy_model(AblationFlags::FULL, 2);
    assert_eq!(2 * m.adapter_param_count(), full.adapter_param_count());
    let s = &toy_samples(1, 2, Split::Test)[0];
    let img: Vec<f64> = s.image.iter().map(|&v| f64::from(v)).collect();
    assert!(m.forward(&img, s.visible_box, 3).unwrap().inmodal.is_none());
}

#[test]
fn training_stages_respect_the_frozen_base() {
    let pre = toy_samples(16, 21, Split::Pretrain);
    let train = toy_samples(16, 22, Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let init = PlugModel::<f32>::new_base(&ModelConfig::toy(), &mut rng).unwrap();
    let (base, log) = pretrain::<f32>(&pre, &ModelConfig::toy(), &short_cfg(2), 0, |_| {}).unwrap();
    assert_ne!(frozen_base_hash(&init), frozen_base_hash(&base));
    assert_eq!(log.steps, 8);

    let hash = frozen_base_hash(&base);
    for flags in AblationFlags::cumulative_rows() {
        let (m, log) = finetune(&base, &train, &short_cfg(2), &toy_point(), flags, 1, |_| {}).unwrap();
        assert_eq!(frozen_base_hash(&m), hash, "{}", flags.label());
        assert_eq!(m.encoder, base.encoder);
        if flags.ft {
            assert_eq!(log.steps, 8);
            assert!(log.final_loss.is_finite());
        } else {
            assert_eq!(log.steps, 0);
            assert_eq!(m.dec_a, base.dec_a);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let pre = toy_samples(8, 31, Split::Pretrain);
    let train = toy_samples(8, 32, Split::Train);
    let test = toy_samples(6, 33, Split::Test);
    let run = || {
        let (base, plog) = pretrain::<f32>(&pre, &ModelConfig::toy(), &short_cfg(2), 5, |_| {}).unwrap();
        let (m, flog) = finetune(&base, &train, &short_cfg(2), &toy_point(), AblationFlags::FULL, 5, |_| {}).unwrap();
        let opts = EvalOptions {
            threshold: 0.3,
            threshold_space: Default::default(),
            eps: 2,
            prompt: PromptSource::Visible,
        };
        let report = evaluate(&m, &test, &opts).unwrap();
        (plog.final_loss, flog.final_loss, report)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn finetuning_lowers_the_loss() {
    let pre = toy_samples(32, 41, Split::Pretrain);
    let train = toy_samples(32, 42, Split::Train);
    let (base, plog) = pretrain::<f32>(&pre, &ModelConfig::toy(), &short_cfg(6), 0, |_| {}).unwrap();
    assert!(plog.epochs.last().unwrap().loss < plog.epochs[0].loss);
    let (_, log) = finetune(&base, &train, &short_cfg(6), &toy_point(), AblationFlags::FULL, 0, |_| {}).unwrap();
    assert!(log.epochs.last().unwrap().loss <= log.epochs[0].loss);
}
