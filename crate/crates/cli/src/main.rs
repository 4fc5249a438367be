//! Operator entry points: dataset generation, training, evaluation and
//! inference over the dataset/checkpoint file formats.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use raymap_core::config::RunConfig;
use raymap_core::metrics::{class_name, evaluate};
use raymap_core::numerics::Scalar;
use raymap_core::synthdata::{self, GenSpec, Sample};
use raymap_core::train::{loss_csv, train};
use raymap_core::{checkpoint, image_io, Tensor};

#[derive(Parser)]
#[command(name = "raymap", about = "Image-to-BEV translation: data, training, evaluation, inference", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct Common {
    /// Random seed (generation and training; accepted everywhere)
    #[arg(long)]
    seed: Option<u64>,
    /// Numeric precision of the run
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
    /// Worker threads; 1 is the reference single-threaded behavior
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Gen {
        /// Generation spec file (key = value); omit for defaults
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a generated dataset
    Train {
        /// Run configuration (key = value); omit for the default setup
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run inference on one sample directory, writing per-class PGMs
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { spec, out, count, common } => {
            let spec = match spec {
                Some(path) => GenSpec::load(&path).with_context(|| format!("loading {}", path.display()))?,
                None => GenSpec::default(),
            };
            let seed = common.seed.unwrap_or(0);
            match common.precision {
                Precision::F32 => {
                    synthdata::generate_dataset::<f32>(&out, &spec, count, seed, common.threads)?
                }
                Precision::F64 => {
                    synthdata::generate_dataset::<f64>(&out, &spec, count, seed, common.threads)?
                }
            };
            println!("wrote {count} samples to {}", out.display());
            Ok(())
        }
        Command::Train { config, data, out, common } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path).with_context(|| format!("loading {}", path.display()))?,
                None => RunConfig::default(),
            };
            if let Some(seed) = common.seed {
                cfg.train.seed = seed;
            }
            match common.precision {
                Precision::F32 => cmd_train::<f32>(&cfg, &data, &out, common.threads),
                Precision::F64 => cmd_train::<f64>(&cfg, &data, &out, common.threads),
            }
        }
        Command::Eval { checkpoint, data, out, common } => match common.precision {
            Precision::F32 => cmd_eval::<f32>(&checkpoint, &data, &out, common.threads),
            Precision::F64 => cmd_eval::<f64>(&checkpoint, &data, &out, common.threads),
        },
        Command::Infer { checkpoint, sample, out, common } => match common.precision {
            Precision::F32 => cmd_infer::<f32>(&checkpoint, &sample, &out),
            Precision::F64 => cmd_infer::<f64>(&checkpoint, &sample, &out),
        },
    }
}

fn load_samples<T: Scalar>(data: &Path, temporal: usize) -> anyhow::Result<Vec<Sample<T>>> {
    let dirs = synthdata::list_dataset(data)?;
    let mut samples = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        samples.push(
            synthdata::read_sample::<T>(dir, temporal)
                .with_context(|| format!("reading {}", dir.display()))?,
        );
    }
    Ok(samples)
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, data: &Path, out: &Path, threads: usize) -> anyhow::Result<()> {
    let samples = load_samples::<T>(data, cfg.model.temporal)?;
    check_dataset_shape(cfg, &samples)?;
    std::fs::create_dir_all(out)?;
    let mut model = raymap_core::model::Model::<T>::new(cfg.model.clone(), cfg.train.seed)?;
    let losses = train(&mut model, &samples, &cfg.train, threads, |epoch, loss| {
        println!("epoch {:>3}  loss {loss:.6}", epoch + 1);
    })?;
    std::fs::write(out.join("loss.csv"), loss_csv(&losses))?;
    checkpoint::save(&out.join("model.bevt"), &model, cfg)?;
    let metrics = evaluate(&model, &samples, threads)?;
    std::fs::write(out.join("metrics.csv"), metrics.csv())?;
    println!("final training-split mean IoU: {:.4}", metrics.mean);
    Ok(())
}

fn check_dataset_shape<T: Scalar>(cfg: &RunConfig, samples: &[Sample<T>]) -> anyhow::Result<()> {
    let Some(first) = samples.first() else {
        bail!("dataset is empty");
    };
    let expect_img = [3, cfg.model.image_height, cfg.model.image_width];
    if first.image().shape() != expect_img {
        bail!(
            "dataset image shape {:?} does not match config {:?}",
            first.image().shape(),
            expect_img
        );
    }
    let expect_gt = [cfg.model.classes, cfg.model.bev_z, cfg.model.bev_x];
    if first.gt.shape() != expect_gt {
        bail!(
            "dataset ground truth {:?} does not match config {:?}",
            first.gt.shape(),
            expect_gt
        );
    }
    Ok(())
}

fn cmd_eval<T: Scalar>(ckpt: &Path, data: &Path, out: &Path, threads: usize) -> anyhow::Result<()> {
    let (model, cfg) = checkpoint::load::<T>(ckpt)?;
    let samples = load_samples::<T>(data, cfg.model.temporal)?;
    check_dataset_shape(&cfg, &samples)?;
    std::fs::create_dir_all(out)?;
    let metrics = evaluate(&model, &samples, threads)?;
    std::fs::write(out.join("metrics.csv"), metrics.csv())?;
    for (name, v) in &metrics.per_class {
        println!("{name}: {v:.4}");
    }
    println!("mean: {:.4}", metrics.mean);
    Ok(())
}

fn cmd_infer<T: Scalar>(ckpt: &Path, sample_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let (model, cfg) = checkpoint::load::<T>(ckpt)?;
    let sample = synthdata::read_sample::<T>(sample_dir, cfg.model.temporal)?;
    std::fs::create_dir_all(out)?;
    let geom = model.build_geometry(&sample.cam)?;
    let output = model.forward(&geom, &sample.frames)?;
    let probs = &output.probs[0];
    let (k, z, x) = (cfg.model.classes, cfg.model.bev_z, cfg.model.bev_x);
    for c in 0..k {
        let mut plane = Tensor::<T>::zeros(vec![z, x]);
        for iz in 0..z {
            for ix in 0..x {
                plane.set(&[iz, ix], probs.at(&[c, iz, ix]));
            }
        }
        let name = format!("{}.pgm", class_name(c, k));
        image_io::write_pgm(&out.join(name), &plane)?;
    }
    image_io::write_pgm(&out.join("mask.pgm"), &geom.fov_mask)?;
    println!("wrote {} class maps to {}", k, out.display());
    Ok(())
}
