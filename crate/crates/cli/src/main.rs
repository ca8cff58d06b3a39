use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use plug_core::bench::{self, BenchRunner, RunResult};
use plug_core::metrics::PromptSource;
use plug_core::checkpoint;
use plug_core::config::RunConfig;
use plug_core::data::{samples_from_scenes, Sample};
use plug_core::gradcheck::gradcheck;
use plug_core::metrics::evaluate;
use plug_core::model::AblationFlags;
use plug_core::syndata::{generate_split, read_dataset, write_dataset, BBox, Split};
use plug_core::train::{finetune, pretrain};
use plug_core::viz;
use plug_core::PlugError;

#[derive(Parser)]
#[command(name = "plug", version, about = "Amodal segmentation with parallel low-rank adapters")]
struct Cli {
    /// Worker threads (default: logical cores). PLUG_JOBS overrides.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the base model on an unoccluded dataset.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finetune a pretrained base on an occluded dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        flags: FlagArgs,
    },
    /// Evaluate a checkpoint, or run the ablation suite from a pretrained base.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        ablation: bool,
        /// Training split for `--ablation`.
        #[arg(long, required_if_eq("ablation", "true"))]
        train_data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict masks for one image and box.
    Predict {
        #[arg(long)]
        image: PathBuf,
        /// Visible box as x0,y0,x1,y1 in image pixels.
        #[arg(long)]
        bbox: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check on the toy configuration.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run (or resume) the full synthetic benchmark.
    Bench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stop after this many jobs.
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Args, Clone, Copy)]
struct FlagArgs {
    #[arg(long)]
    no_ft: bool,
    #[arg(long)]
    no_pt: bool,
    #[arg(long)]
    no_rm: bool,
    #[arg(long)]
    no_pl: bool,
}

impl FlagArgs {
    fn flags(self) -> AblationFlags {
        AblationFlags {
            ft: !self.no_ft,
            pt: !self.no_pt,
            rm: !self.no_rm,
            pl: !self.no_pl,
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<PlugError>() {
        Some(PlugError::InvalidArgument(_)) => 2,
        Some(PlugError::GenerationFailed { .. }) => 3,
        Some(PlugError::Divergence { .. }) => 4,
        Some(PlugError::Checkpoint(_) | PlugError::Config(_) | PlugError::ShapeMismatch(_)) => 5,
        Some(PlugError::GradCheck(_)) => 1,
        _ => 1,
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    PlugError::InvalidArgument(msg.into()).into()
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn load_samples(dir: &Path, size: usize) -> anyhow::Result<Vec<Sample>> {
    let (_, scenes) = read_dataset(dir)?;
    Ok(samples_from_scenes(&scenes, size)?)
}

fn write_json<S: serde::Serialize>(path: &Path, v: &S) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn log_path(out: &Path) -> PathBuf {
    out.with_extension("log.json")
}

fn parse_bbox(s: &str) -> anyhow::Result<BBox> {
    let v: Vec<i64> = s
        .split(',')
        .map(|p| p.trim().parse::<i64>())
        .collect::<Result<_, _>>()
        .map_err(|_| invalid(format!("malformed bbox {s:?}")))?;
    match v[..] {
        [x0, y0, x1, y1] if x0 < x1 && y0 < y1 => Ok(BBox::new(x0, y0, x1, y1)),
        _ => Err(invalid(format!("bbox {s:?} must be x0,y0,x1,y1 with x0<x1, y0<y1"))),
    }
}

/// Config for a run seeded from `init`: the explicit file if given (which
/// must agree with the checkpoint's model), else the checkpoint's own echo.
fn config_for(init: &checkpoint::Header, path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_value(&init.config)?,
    };
    let mut want = cfg.model();
    let mut have = init.model.clone();
    want.encoder.rank = 0;
    have.encoder.rank = 0;
    if want != have {
        return Err(PlugError::Checkpoint("config model shape does not match the checkpoint".into()).into());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Gen {
            out,
            num,
            seed,
            split,
            config,
        } => {
            if num == 0 {
                return Err(invalid("--num must be positive"));
            }
            let split: Split = split.parse()?;
            let cfg = load_config(config.as_deref())?;
            let generator = cfg.generator.with_split(split);
            let scenes = generate_split(num, seed, &generator)?;
            write_dataset(&out, split, seed, &generator, &scenes)?;
            println!("{}", out.join(plug_core::syndata::MANIFEST_FILE).display());
        }
        Cmd::Pretrain { data, config, out, seed } => {
            let cfg = load_config(config.as_deref())?;
            let samples = load_samples(&data, cfg.encoder.image_size)?;
            if samples.iter().any(|s| s.occlusion_ratio != 0.0) {
                return Err(invalid("pretraining needs an unoccluded (pretrain) split"));
            }
            let seed = seed.unwrap_or(cfg.pretrain.seed);
            let (model, log) = pretrain::<f32>(&samples, &cfg.model(), &cfg.pretrain, seed, |e| {
                eprintln!("epoch {} loss {:.5} lr {:.2e}", e.epoch, e.loss, e.lr_end)
            })?;
            checkpoint::save(&out, &model, None, cfg.to_value())?;
            write_json(&log_path(&out), &log)?;
            println!("trainable parameters: {}", log.trainable_params);
            println!("frozen base sha256: {}", checkpoint::frozen_base_hash(&model));
        }
        Cmd::Train {
            data,
            init,
            config,
            out,
            seed,
            flags,
        } => {
            let base = checkpoint::load::<f32>(&init)?;
            if base.model.adapter_param_count() > 0 {
                return Err(PlugError::Checkpoint("--init must be a pretrained base without adapters".into()).into());
            }
            let mut cfg = config_for(&base.header, config.as_deref())?;
            let flags = flags.flags();
            cfg.train.flags = flags;
            let samples = load_samples(&data, cfg.encoder.image_size)?;
            let seed = seed.unwrap_or(cfg.train.seed);
            let mut base_model = base.model;
            base_model.cfg.encoder.rank = cfg.encoder.rank;
            let (model, log) = finetune(&base_model, &samples, &cfg.train, &cfg.point, flags, seed, |e| {
                eprintln!("epoch {} loss {:.5} lr {:.2e}", e.epoch, e.loss, e.lr_end)
            })?;
            checkpoint::save(&out, &model, Some(flags), cfg.to_value())?;
            write_json(&log_path(&out), &log)?;
            println!("{}", flags.label());
            println!("trainable parameters: {}", log.trainable_params);
            println!("adapter parameters: {}", model.adapter_param_count());
            println!("frozen base sha256: {}", checkpoint::frozen_base_hash(&model));
        }
        Cmd::Eval {
            data,
            ckpt,
            report,
            ablation,
            train_data,
            seed,
        } => {
            let ck = checkpoint::load::<f32>(&ckpt)?;
            let cfg = RunConfig::from_value(&ck.header.config)?;
            let test = load_samples(&data, ck.model.image_size())?;
            if ablation {
                if ck.model.adapter_param_count() > 0 {
                    return Err(PlugError::Checkpoint("--ablation needs a pretrained base checkpoint".into()).into());
                }
                let train_dir = train_data.ok_or_else(|| invalid("--ablation requires --train-data"))?;
                let train = load_samples(&train_dir, ck.model.image_size())?;
                let seed = seed.unwrap_or(cfg.train.seed);
                let rows: Vec<RunResult> = bench::ablation_run(&ck.model, &train, &test, &cfg, seed, |label, e| {
                    eprintln!("{label} epoch {} loss {:.5}", e.epoch, e.loss)
                })?;
                for r in &rows {
                    println!("{:<12} mIoU_full {:.4} mIoU_occ {:.4}", r.label, r.metrics.miou_full, r.metrics.miou_occ);
                }
                write_json(&report, &rows)?;
            } else {
                let flags = ck.header.flags.unwrap_or(AblationFlags::NONE);
                let opts = bench::eval_options(&cfg, bench::prompt_for(flags));
                let r = evaluate(&ck.model, &test, &opts)?;
                println!("mIoU_full {:.4} mIoU_occ {:.4} ({} objects)", r.miou_full, r.miou_occ, r.n_objects);
                write_json(&report, &r)?;
            }
        }
        Cmd::Predict { image, bbox, ckpt, out } => {
            let bbox = parse_bbox(&bbox)?;
            let (img, h, w) = viz::load_rgb(&image)?;
            if bbox.x0 < 0 || bbox.y0 < 0 || bbox.x1 > w as i64 || bbox.y1 > h as i64 {
                return Err(invalid(format!("bbox {:?} lies outside the {w}x{h} image", bbox.to_array())));
            }
            let ck = checkpoint::load::<f32>(&ckpt)?;
            let cfg = RunConfig::from_value(&ck.header.config)?;
            let opts = bench::eval_options(&cfg, PromptSource::Visible);
            let r = viz::predict(&ck.model, &img, h, w, bbox, &opts)?;
            r.save(&out)?;
            println!("{}", out.display());
        }
        Cmd::Gradcheck { seed, report } => {
            let r = gradcheck(seed)?;
            for g in &r.groups {
                println!(
                    "{:<8} max rel error {:.3e} ({} probes) {}",
                    g.group,
                    g.max_rel_error,
                    g.probes,
                    if g.passed { "ok" } else { "FAIL" }
                );
            }
            println!("frozen base max |grad| {:e}", r.frozen_base_max_abs);
            println!("adapter A max |grad| at init {:e}", r.init_adapter_a_max_abs);
            if let Some(p) = report {
                write_json(&p, &r)?;
            }
            if !r.passed {
                return Err(PlugError::GradCheck("one or more groups exceed the tolerance".into()).into());
            }
        }
        Cmd::Bench { out, config, limit } => {
            let cfg = load_config(config.as_deref())?;
            let mut runner = BenchRunner {
                dir: out,
                cfg,
                log: Box::new(|m| eprintln!("{m}")),
            };
            runner.run(limit)?;
        }
    }
    Ok(())
}

fn init_pool(jobs: Option<usize>) -> anyhow::Result<()> {
    let env = std::env::var("PLUG_JOBS").ok();
    let jobs = match env {
        Some(v) => Some(v.parse::<usize>().map_err(|_| invalid(format!("PLUG_JOBS={v:?} is not a count")))?),
        None => jobs,
    };
    if let Some(n) = jobs {
        if n == 0 {
            bail!(invalid("--jobs must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!(e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_pool(cli.jobs).and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
