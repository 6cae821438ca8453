//! Command-line entry point for the full density-estimation pipeline:
//! synthetic data generation, pretraining, factorization planning, training,
//! evaluation, sampling, interpolation, and the four-strategy ablation.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error, 3 divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use lcflow::data::{generate_blobs, write_image_grid, Dataset};
use lcflow::flow::FlowModel;
use lcflow::plan::{derive_plan, FactorizationPlan, Strategy};
use lcflow::tensor::Tensor;
use lcflow::train::{
    evaluate_bpd, interpolate, plan_reference, pretrain, run_ablation, sample, stream, substream,
    train_with_plan, TrainConfig,
};
use lcflow::Error;

#[derive(Parser)]
#[command(
    name = "lcflow",
    version,
    about = "Multi-scale normalizing-flow density estimation with log-det-guided factorization"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic blob dataset (FFT1 + metadata sidecar)
    GenData {
        /// Output dataset path (sidecar lands at <out>.meta)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of images
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Spatial size (s×s, single channel)
        #[arg(long, default_value_t = 8)]
        size: usize,
        /// Phase-noise structure level in [0, 1]; 0 is i.i.d. uniform noise
        #[arg(long, default_value_t = 1.0)]
        structure: f64,
    },
    /// Phase one: train the factor-free model and save it with its
    /// boundary log-det maps
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Output directory (pretrain.ffm1, boundary-maps.fft1)
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive a factorization plan and write the FFPLAN file
    Plan {
        #[command(flatten)]
        config: ConfigArgs,
        /// lcma | static-realnvp (static) | random | reverse-lcma (reverse)
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        data: PathBuf,
        /// Pretrained model (required for lcma / reverse-lcma)
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output directory (plan-<strategy>-seed<seed>.ffplan)
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase two: train a fresh model following a plan
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Output directory (model.ffm1, metrics.csv)
        #[arg(long)]
        out: PathBuf,
    },
    /// Print train/validation bits/dim of a trained model on a dataset
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Draw prior samples and render them as an image grid
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// Number of samples
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Output image (PGM for 1 channel, PPM for 3)
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolate between the first two validation images in latent space
    Interpolate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Number of frames including both endpoints
        #[arg(long, default_value_t = 8)]
        steps: usize,
        /// Output image grid
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all four strategies across consecutive seeds and write the
    /// comparison CSVs and plan files
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Number of seeds (seed, seed+1, …)
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
}

enum AppError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for AppError {
    fn from(e: Error) -> Self {
        AppError::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn run(cmd: Cmd) -> Result<(), AppError> {
    match cmd {
        Cmd::GenData { out, seed, n, size, structure } => {
            let ds = generate_blobs(n, size, seed, structure)?;
            if let Some(parent) = out.parent() {
                ensure_dir(parent)?;
            }
            ds.save(&out)?;
            eprintln!("wrote {} images to {}", ds.n(), out.display());
            Ok(())
        }
        Cmd::Pretrain { config, data, out } => {
            let cfg = config.load()?;
            let ds = Dataset::load(&data)?;
            ensure_dir(&out)?;
            let (model, maps) = pretrain(&cfg, &ds)?;
            model.save(out.join("pretrain.ffm1"))?;
            let d = maps[0].live.len();
            let flat: Vec<f64> = maps.iter().flat_map(|m| m.live.iter().copied()).collect();
            Tensor::new(vec![maps.len(), d], flat)?.save_fft1(out.join("boundary-maps.fft1"))?;
            eprintln!("wrote pretrained model and {} boundary maps to {}", maps.len(), out.display());
            Ok(())
        }
        Cmd::Plan { config, strategy, data, model, out } => {
            let strategy: Strategy = strategy
                .parse()
                .map_err(|e: Error| AppError::Usage(e.to_string()))?;
            let cfg = config.load()?;
            let ds = Dataset::load(&data)?;
            ensure_dir(&out)?;
            let plan = if strategy.needs_pretrained() {
                let path = model.ok_or_else(|| {
                    AppError::Usage(format!("--model is required for strategy {strategy}"))
                })?;
                let pre = FlowModel::load(path)?;
                let reference = plan_reference(&cfg, &ds)?;
                derive_plan(strategy, ds.layout(), cfg.scales, cfg.seed, Some((&pre, &reference)))?
            } else {
                derive_plan(strategy, ds.layout(), cfg.scales, cfg.seed, None)?
            };
            let path = out.join(format!("plan-{strategy}-seed{}.ffplan", cfg.seed));
            plan.save(&path)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Cmd::Train { config, data, plan, out } => {
            let cfg = config.load()?;
            let ds = Dataset::load(&data)?;
            let plan = FactorizationPlan::load(&plan)?;
            ensure_dir(&out)?;
            let (model, metrics) = train_with_plan(&cfg, &ds, &plan)?;
            model.save(out.join("model.ffm1"))?;
            metrics.save_csv(out.join("metrics.csv"))?;
            eprintln!(
                "final validation bits/dim: {:.4} (plan {})",
                metrics.final_valid_bpd()?,
                metrics.plan_ref
            );
            Ok(())
        }
        Cmd::Eval { config, model, data } => {
            let cfg = config.load()?;
            let model = FlowModel::load(&model)?;
            let ds = Dataset::load(&data)?;
            let train_bpd = evaluate_bpd(
                &model,
                &ds.train_matrix()?,
                cfg.dequant_alpha,
                &mut substream(cfg.seed, stream::EVAL_NOISE),
            )?;
            let valid_bpd = evaluate_bpd(
                &model,
                &ds.valid_matrix()?,
                cfg.dequant_alpha,
                &mut substream(cfg.seed, stream::EVAL_NOISE),
            )?;
            println!("train_bpd={train_bpd}");
            println!("valid_bpd={valid_bpd}");
            Ok(())
        }
        Cmd::Sample { config, model, n, out } => {
            let cfg = config.load()?;
            let model = FlowModel::load(&model)?;
            let imgs = sample(&model, n, cfg.dequant_alpha, &mut substream(cfg.seed, stream::SAMPLE))?;
            if let Some(parent) = out.parent() {
                ensure_dir(parent)?;
            }
            write_image_grid(&imgs, &out)?;
            eprintln!("wrote {n} samples to {}", out.display());
            Ok(())
        }
        Cmd::Interpolate { config, model, data, steps, out } => {
            let cfg = config.load()?;
            let model = FlowModel::load(&model)?;
            let ds = Dataset::load(&data)?;
            let l = ds.layout();
            let valid = ds.valid_matrix()?;
            if valid.shape()[0] < 2 {
                return Err(AppError::Runtime(Error::Data(
                    "need at least two validation images to interpolate".into(),
                )));
            }
            let a = valid.slice(0, 0, 1)?.reshape(&[l.s, l.s, l.c])?;
            let b = valid.slice(0, 1, 2)?.reshape(&[l.s, l.s, l.c])?;
            let frames = interpolate(&model, &a, &b, steps, cfg.dequant_alpha)?;
            let flat: Vec<f64> = frames.iter().flat_map(|f| f.data().to_vec()).collect();
            let grid = Tensor::new(vec![frames.len(), l.s, l.s, l.c], flat)?;
            if let Some(parent) = out.parent() {
                ensure_dir(parent)?;
            }
            write_image_grid(&grid, &out)?;
            eprintln!("wrote {steps} frames to {}", out.display());
            Ok(())
        }
        Cmd::Ablate { config, data, seeds, out } => {
            if seeds == 0 {
                return Err(AppError::Usage("--seeds must be at least 1".into()));
            }
            let cfg = config.load()?;
            let ds = Dataset::load(&data)?;
            let seed_list: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
            let report = run_ablation(&cfg, &ds, &seed_list, &out)?;
            println!("strategy            mean_bpd   stddev");
            for s in &report.summaries {
                println!("{:<18} {:>9.4} {:>8.4}", s.strategy.to_string(), s.mean, s.stddev);
            }
            Ok(())
        }
    }
}
