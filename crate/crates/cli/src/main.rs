use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use dear::baselines::{Stack, StackOrder};
use dear::checkpoint::{Checkpoint, FORMAT_VERSION};
use dear::config::{EnsembleMode, HighpassMode};
use dear::dataset::{build_dataset, write_synthetic_hr, Manifest, MaskSource};
use dear::evaluation::{evaluate, EvalCase, LpipsScorer, Restorer};
use dear::imaging::{apply_mask, read_image, read_mask, write_image, Image, Mask};
use dear::model::{DearModel, DEFAULT_CHUNK};
use dear::trainer::{list_checkpoints, TrainConfig, Trainer, CHECKPOINT_DIR};
use dear::{selftest, DearError, Result};

fn version() -> &'static str {
    static V: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    V.get_or_init(|| format!("{} (checkpoint format v{FORMAT_VERSION})", env!("CARGO_PKG_VERSION")))
}

#[derive(Parser, Debug)]
#[command(name = "dear", version = version(), about = "Joint inpainting and arbitrary-scale super-resolution")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic HR images (for smoke tests without a real dataset).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Build LR, mask and masked-LR files plus a manifest from a folder of HR PNGs.
    Dataset {
        #[arg(long)]
        hr_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, value_enum, default_value_t = MaskKind::Gen)]
        mask: MaskKind,
        /// Mask folder, required with `--mask dir`.
        #[arg(long)]
        mask_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        coverage_min: f64,
        #[arg(long, default_value_t = 0.3)]
        coverage_max: f64,
    },
    /// Train from a config file and a manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Experimental: resample the target scale in [1, s] each step.
        #[arg(long)]
        multi_scale: bool,
        #[arg(long, value_enum)]
        mask_channel: Option<Switch>,
        #[arg(long, value_enum)]
        ensemble: Option<EnsembleArg>,
        #[arg(long, value_enum)]
        highpass: Option<HighpassArg>,
    },
    /// Continue training from a checkpoint file or a training output directory.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// New total epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a model or a baseline on a manifest.
    Eval {
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        model: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
        /// Executable printing a perceptual distance for two PNG paths.
        #[arg(long)]
        lpips: Option<PathBuf>,
    },
    /// Complete and upscale one image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Missing pixels are white; omit for an unmasked input.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 4.0)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CHUNK)]
        chunk_size: usize,
        /// Also write the LR importance map as a grayscale PNG.
        #[arg(long)]
        dump_importance: Option<PathBuf>,
    },
    /// Run the numerical invariant checks.
    Selftest,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MaskKind {
    Gen,
    Dir,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Switch {
    On,
    Off,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum EnsembleArg {
    Area,
    Invdist,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum HighpassArg {
    Literal,
    Delta,
}

fn install_pool(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| DearError::invalid(format!("cannot configure {n} workers: {e}")))?;
    }
    Ok(())
}

/// A checkpoint path, or a training directory whose newest checkpoint is used.
fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let dir = if path.join(CHECKPOINT_DIR).is_dir() { path.join(CHECKPOINT_DIR) } else { path.to_path_buf() };
    list_checkpoints(&dir)?
        .pop()
        .ok_or_else(|| DearError::invalid(format!("no checkpoints in {}", dir.display())))
}

fn load_model(path: &Path) -> Result<DearModel> {
    let path = resolve_checkpoint(path)?;
    let ckpt = Checkpoint::load(&path)?;
    DearModel::with_params(&ckpt.config.model, ckpt.params)
}

fn train(trainer: &mut Trainer, data: &Path, out: &Path) -> Result<()> {
    let records = Manifest::load(data)?.load_all()?;
    info!(
        "{} records, {} parameters, epochs {}..{}",
        records.len(),
        trainer.model.num_parameters(),
        trainer.epoch,
        trainer.config.epochs
    );
    trainer.train(&records, Some(out), None)?;
    println!("trained to epoch {}; outputs in {}", trainer.epoch, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let seed = g.seed.unwrap_or(0);
    match cli.command {
        Command::Synth { out, count, size } => {
            install_pool(g.workers)?;
            let files = write_synthetic_hr(&out, count, size, seed)?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
        Command::Dataset {
            hr_dir,
            out,
            scale,
            mask,
            mask_dir,
            coverage_min,
            coverage_max,
        } => {
            install_pool(g.workers)?;
            let source = match mask {
                MaskKind::Gen => MaskSource::Generator {
                    coverage: (coverage_min, coverage_max),
                },
                MaskKind::Dir => MaskSource::Directory(
                    mask_dir.ok_or_else(|| DearError::invalid("--mask dir requires --mask-dir"))?,
                ),
            };
            let manifest = build_dataset(&hr_dir, &out, scale, &source, seed)?;
            println!("wrote {} samples to {}", manifest.entries.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            epochs,
            multi_scale,
            mask_channel,
            ensemble,
            highpass,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            if let Some(w) = g.workers {
                cfg.workers = w;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.multi_scale |= multi_scale;
            if let Some(m) = mask_channel {
                cfg.model.mask_channel = matches!(m, Switch::On);
            }
            if let Some(e) = ensemble {
                cfg.model.ensemble = match e {
                    EnsembleArg::Area => EnsembleMode::Area,
                    EnsembleArg::Invdist => EnsembleMode::Invdist,
                };
            }
            if let Some(h) = highpass {
                cfg.model.highpass = match h {
                    HighpassArg::Literal => HighpassMode::Literal,
                    HighpassArg::Delta => HighpassMode::Delta,
                };
            }
            let mut trainer = Trainer::new(cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| DearError::io(&out, e))?;
            let cfg_path = out.join("config.toml");
            std::fs::write(&cfg_path, trainer.config.to_toml()).map_err(|e| DearError::io(&cfg_path, e))?;
            train(&mut trainer, &data, &out)?;
        }
        Command::Resume {
            checkpoint,
            data,
            out,
            epochs,
        } => {
            let mut ckpt = Checkpoint::load(resolve_checkpoint(&checkpoint)?)?;
            if let Some(e) = epochs {
                ckpt.config.epochs = e;
            }
            if let Some(w) = g.workers {
                ckpt.config.workers = w;
            }
            if g.seed.is_some_and(|s| s != ckpt.config.seed) {
                log::warn!("--seed is ignored on resume; the checkpoint carries its RNG state");
            }
            let mut trainer = Trainer::from_checkpoint(ckpt)?;
            train(&mut trainer, &data, &out)?;
        }
        Command::Eval {
            model,
            baseline,
            data,
            scale,
            out,
            lpips,
        } => {
            install_pool(g.workers)?;
            let manifest = Manifest::load(&data)?;
            let cases = manifest
                .load_all()?
                .into_iter()
                .map(|r| EvalCase::new(r.id.clone(), r.lr_masked, &r.hr, scale))
                .collect::<Result<Vec<_>>>()?;
            let restorer: Box<dyn Restorer> = match (model, baseline) {
                (Some(m), _) => Box::new(load_model(&m)?),
                (None, Some(b)) => Box::new(Stack {
                    order: StackOrder::parse(&b)?,
                }),
                (None, None) => return Err(DearError::invalid("either --model or --baseline is required")),
            };
            let scorer = lpips.map(|executable| LpipsScorer { executable });
            let name = data.display().to_string();
            let report = evaluate(restorer.as_ref(), &name, &cases, scale, scorer.as_ref())?;
            report.write_csv(&out)?;
            let m = &report.mean;
            println!(
                "{} ×{}: psnr {:.3} ssim {:.4} l1 {:.5} over {} images",
                report.model,
                scale,
                m.psnr,
                m.ssim,
                m.l1,
                report.images.len()
            );
        }
        Command::Infer {
            model,
            input,
            mask,
            scale,
            out,
            chunk_size,
            dump_importance,
        } => {
            install_pool(g.workers)?;
            let model = load_model(&model)?;
            let img = read_image(&input)?;
            if img.channels() != 3 {
                return Err(DearError::invalid(format!("{} is not an RGB image", input.display())));
            }
            let mask = match mask {
                Some(p) => read_mask(p)?,
                None => Mask::zeros(img.height(), img.width()),
            };
            let masked = apply_mask(&img, &mask)?;
            let emb = model.embedding(&masked)?;
            let (oh, ow) = dear::model::output_size(img.height(), img.width(), scale)?;
            let result = model.render_embedding(&emb, oh, ow, chunk_size)?;
            write_image(&result, &out)?;
            if let Some(p) = dump_importance {
                let map = Image::from_clamped(img.height(), img.width(), 1, emb.importance.0.data().to_vec())?;
                write_image(&map, &p)?;
            }
            println!("wrote {}×{} image to {}", oh, ow, out.display());
        }
        Command::Selftest => {
            let results = selftest::run(seed);
            let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
            for r in &results {
                println!("{:<width$}  {}  {}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(DearError::invalid(format!("{failed} self-test check(s) failed")));
            }
            println!("all {} checks passed", results.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
