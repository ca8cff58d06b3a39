//! Ablation suite, rank sweep and a resumable benchmark runner that writes
//! one JSON artifact per finished unit of work.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, frozen_base_hash};
use crate::config::RunConfig;
use crate::data::{samples_from_scenes, Sample};
use crate::error::{PlugError, Result};
use crate::metrics::{evaluate, EvalOptions, MetricsReport, PromptSource};
use crate::model::{AblationFlags, PlugModel, Stage};
use crate::scalar::Scalar;
use crate::syndata::{generate_split, Split};
use crate::train::{finetune, pretrain, EpochLog, TrainLog};

pub const RANKS: [usize; 4] = [4, 8, 16, 32];

/// Crop-space samples for one split of the run configuration.
pub fn split_samples(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    let d = &cfg.data;
    let (num, seed, gen_split) = match split {
        Split::Pretrain => (d.pretrain_objects, d.pretrain_seed, Split::Pretrain),
        Split::Train => (d.train_objects, d.train_seed, Split::Train),
        Split::Val => (d.val_objects, d.val_seed, Split::Val),
        Split::Test => (d.test_objects, d.test_seed, Split::Test),
    };
    let scenes = generate_split(num, seed, &cfg.generator.with_split(gen_split))?;
    samples_from_scenes(&scenes, cfg.encoder.image_size)
}

/// Unoccluded held-out samples for checking the pretrained base.
pub fn pretrain_val_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let scenes = generate_split(
        cfg.data.pretrain_val_objects,
        cfg.data.pretrain_seed ^ 0x7661_6c00,
        &cfg.generator.with_split(Split::Pretrain),
    )?;
    samples_from_scenes(&scenes, cfg.encoder.image_size)
}

pub fn eval_options(cfg: &RunConfig, prompt: PromptSource) -> EvalOptions {
    EvalOptions {
        threshold: cfg.train.threshold,
        threshold_space: cfg.train.threshold_space,
        eps: cfg.point.eps,
        prompt,
    }
}

/// The frozen baseline is prompted with the amodal box, every other row
/// with the visible box.
pub fn prompt_for(flags: AblationFlags) -> PromptSource {
    if flags.ft {
        PromptSource::Visible
    } else {
        PromptSource::Amodal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub flags: AblationFlags,
    pub seed: u64,
    pub rank: usize,
    pub prompt: PromptSource,
    pub adapter_params: usize,
    pub trainable_params: usize,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub seconds: f64,
    pub config: serde_json::Value,
    pub metrics: MetricsReport,
}

/// Finetunes `base` with `flags` and evaluates on `test`.
pub fn run_row<T: Scalar>(
    base: &PlugModel<T>,
    train: &[Sample],
    test: &[Sample],
    cfg: &RunConfig,
    flags: AblationFlags,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(RunResult, PlugModel<T>, TrainLog)> {
    let start = Instant::now();
    let before = frozen_base_hash(base);
    let (model, log) = finetune(base, train, &cfg.train, &cfg.point, flags, seed, on_epoch)?;
    let prompt = prompt_for(flags);
    let metrics = evaluate(&model, test, &eval_options(cfg, prompt))?;
    let result = RunResult {
        label: flags.label(),
        flags,
        seed,
        rank: cfg.encoder.rank,
        prompt,
        adapter_params: model.adapter_param_count(),
        trainable_params: model.trainable_param_count(Stage::Finetune),
        frozen_hash_before: before,
        frozen_hash_after: frozen_base_hash(&model),
        initial_loss: log.initial_loss,
        final_loss: log.final_loss,
        steps: log.steps,
        seconds: start.elapsed().as_secs_f64(),
        config: cfg.to_value(),
        metrics,
    };
    Ok((result, model, log))
}

/// All five cumulative rows for one seed, in table order.
pub fn ablation_run<T: Scalar>(
    base: &PlugModel<T>,
    train: &[Sample],
    test: &[Sample],
    cfg: &RunConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&str, &EpochLog),
) -> Result<Vec<RunResult>> {
    AblationFlags::cumulative_rows()
        .into_iter()
        .map(|flags| {
            let label = flags.label();
            run_row(base, train, test, cfg, flags, seed, |e| on_epoch(&label, e)).map(|r| r.0)
        })
        .collect()
}

/// Closed-form adapter parameter count: blocks · 2 projections · branches · 2 matrices · r · d.
pub fn adapter_param_formula(blocks: usize, rank: usize, dim: usize, branches: usize) -> usize {
    blocks * 2 * branches * 2 * rank * dim
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainResult {
    pub seconds: f64,
    pub frozen_base_sha256: String,
    pub log: TrainLog,
    pub val: MetricsReport,
}

/// One unit of benchmark work, identified by its artifact file name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Job {
    Table { seed: u64, row: usize },
    Rank { rank: usize },
    Repeat { row: usize },
}

impl Job {
    pub fn file_name(&self) -> String {
        match self {
            Job::Table { seed, row } => format!("table_s{seed}_row{}.json", row + 1),
            Job::Rank { rank } => format!("rank_r{rank}.json"),
            Job::Repeat { row } => format!("repeat_row{}.json", row + 1),
        }
    }
}

/// Work order: every row of the first seed, the remaining seeds, the rank
/// sweep (rank 4 is the first seed's full row), then the repeat of the first seed.
pub fn job_list(cfg: &RunConfig) -> Vec<Job> {
    let seeds = &cfg.train.seeds;
    let mut jobs = Vec::new();
    for &seed in seeds {
        for row in 0..5 {
            jobs.push(Job::Table { seed, row });
        }
    }
    for rank in RANKS {
        if rank != cfg.encoder.rank {
            jobs.push(Job::Rank { rank });
        }
    }
    for row in 0..5 {
        jobs.push(Job::Repeat { row });
    }
    jobs
}

/// The parts of a run configuration that determine the pretrained base.
pub fn pretrain_fingerprint(cfg: &RunConfig) -> serde_json::Value {
    let mut model = cfg.model();
    model.encoder.rank = 0;
    let d = &cfg.data;
    serde_json::json!({
        "model": model,
        "pretrain": cfg.pretrain,
        "generator": cfg.generator,
        "data": [d.pretrain_objects, d.pretrain_val_objects, d.pretrain_seed],
    })
}

pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const PRETRAIN_JSON: &str = "pretrain.json";

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(v).map_err(|e| PlugError::Config(e.to_string()))?;
    fs::write(&tmp, text).map_err(|e| PlugError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PlugError::io(path, e))
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| PlugError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PlugError::dataset(path, e.to_string()))
}

/// Runs every missing job under `dir`, skipping artifacts already present.
pub struct BenchRunner {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub log: Box<dyn FnMut(&str) + Send>,
}

impl BenchRunner {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn say(&mut self, msg: String) {
        (self.log)(&msg);
    }

    /// Loads the pretrained base, training it first if absent.
    pub fn base(&mut self) -> Result<PlugModel<f32>> {
        let ckpt = self.path(PRETRAIN_CKPT);
        if ckpt.exists() && self.path(PRETRAIN_JSON).exists() {
            let c = checkpoint::load::<f32>(&ckpt)?;
            let saved = RunConfig::from_value(&c.header.config)?;
            if pretrain_fingerprint(&saved) != pretrain_fingerprint(&self.cfg) {
                return Err(PlugError::Checkpoint("pretrained base was produced with a different config".into()));
            }
            return Ok(c.model);
        }
        self.say("generating pretrain split".into());
        let start = Instant::now();
        let samples = split_samples(&self.cfg, Split::Pretrain)?;
        let val = pretrain_val_samples(&self.cfg)?;
        let cfg = self.cfg.clone();
        let mut log = std::mem::replace(&mut self.log, Box::new(|_| {}));
        let seed = cfg.data.pretrain_seed;
        let res = pretrain::<f32>(&samples, &cfg.model(), &cfg.pretrain, seed, |e| {
            log(&format!("pretrain epoch {} loss {:.5} lr {:.2e}", e.epoch, e.loss, e.lr_end))
        });
        self.log = log;
        let (model, tlog) = res?;
        let val = evaluate(&model, &val, &eval_options(&cfg, PromptSource::Visible))?;
        let mut val_short = val.clone();
        val_short.per_object.clear();
        checkpoint::save(&ckpt, &model, None, cfg.to_value())?;
        write_json(
            &self.path(PRETRAIN_JSON),
            &PretrainResult {
                seconds: start.elapsed().as_secs_f64(),
                frozen_base_sha256: frozen_base_hash(&model),
                log: tlog,
                val: val_short,
            },
        )?;
        self.say(format!("pretrain done: val mIoU {:.4}", val.miou_full));
        Ok(model)
    }

    pub fn run(&mut self, only: Option<usize>) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| PlugError::io(&self.dir, e))?;
        let base = self.base()?;
        let pending: Vec<Job> = job_list(&self.cfg)
            .into_iter()
            .filter(|j| !self.path(&j.file_name()).exists())
            .take(only.unwrap_or(usize::MAX))
            .collect();
        if pending.is_empty() {
            return Ok(());
        }
        let train = split_samples(&self.cfg, Split::Train)?;
        let test = split_samples(&self.cfg, Split::Test)?;
        let rows = AblationFlags::cumulative_rows();
        let first_seed = self.cfg.train.seeds.first().copied().unwrap_or(0);
        for job in pending {
            let (cfg, flags, seed) = match job {
                Job::Table { seed, row } => (self.cfg.clone(), rows[row], seed),
                Job::Repeat { row } => (self.cfg.clone(), rows[row], first_seed),
                Job::Rank { rank } => {
                    let mut c = self.cfg.clone();
                    c.encoder.rank = rank;
                    (c, AblationFlags::FULL, first_seed)
                }
            };
            let name = job.file_name();
            self.say(format!("{name}: {} seed {seed} rank {}", flags.label(), cfg.encoder.rank));
            let mut log = std::mem::replace(&mut self.log, Box::new(|_| {}));
            let res = run_row(&base, &train, &test, &cfg, flags, seed, |e| {
                log(&format!("  epoch {} loss {:.5} lr {:.2e}", e.epoch, e.loss, e.lr_end))
            });
            self.log = log;
            let (result, _, _) = res?;
            self.say(format!(
                "{name}: mIoU_full {:.4} mIoU_occ {:.4} ({:.0}s)",
                result.metrics.miou_full, result.metrics.miou_occ, result.seconds
            ));
            write_json(&self.path(&name), &result)?;
        }
        Ok(())
    }
}
