use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use psvae_core::Precision;

mod config;
mod data;
mod error;
mod imageio;
mod manifest;
mod restore;
mod synth;
mod train;

use config::{Overrides, RunConfig};
use error::{CliError, CliResult};
use train::Stage;

#[derive(Parser)]
#[command(name = "psvae", version, about = "Patch subspace VAE: synthesize, train, evaluate, restore, inspect")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Routed decoders: the component count, or 1 for the single-decoder baseline.
    #[arg(long, global = true)]
    decoders: Option<usize>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    patch_size: Option<usize>,
    #[arg(long, global = true)]
    overlap: Option<usize>,
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt a directory of clean PNGs with masked heterogeneous noise.
    Synth {
        /// Directory of clean PNG images.
        #[arg(long, required_unless_present = "from_manifest")]
        clean: Option<PathBuf>,
        /// Rebuild the noisy images listed in an existing manifest.
        #[arg(long, conflicts_with = "clean")]
        from_manifest: Option<PathBuf>,
    },
    /// Two-stage training on a synthesized dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: Stage,
        /// Stage-1 checkpoint to start stage 2 from (default: OUT/stage1.psvae).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score restored images (or, without a checkpoint, the noisy inputs).
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Restore images and write their route matrices.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write a colour-coded route overlay per image.
        #[arg(long)]
        route_png: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Per-cluster patch counts and PSNR, and per-image route matrices.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn threads_from_env() -> CliResult<()> {
    let Ok(v) = std::env::var("PSVAE_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("PSVAE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: common.seed,
        decoders: common.decoders,
        beta: common.beta,
        patch_size: common.patch_size,
        overlap: common.overlap,
        precision: common.precision,
    });
    Ok(cfg)
}

fn run(command: Command, common: &Common) -> CliResult<()> {
    threads_from_env()?;
    let cfg = resolve(common)?;
    let out: &Path = &common.out;
    match command {
        Command::Synth { clean, from_manifest } => {
            if let Some(m) = from_manifest {
                let mean = synth::replay(&m, out)?;
                println!("mean_psnr = {mean:.4}");
            } else {
                let rec = synth::run(&cfg, &clean.expect("clap enforces --clean"), out)?;
                println!("images = {}\nfactor = {:.6}\nmean_psnr = {:.4}", rec.images, rec.factor, rec.mean_psnr);
            }
        }
        Command::Train { data, stage, init } => {
            let report = train::run(&cfg, &data, out, stage, init.as_deref())?;
            print!("{}", report.to_text());
        }
        Command::Eval { checkpoint, data } => {
            let report = restore::eval(&cfg, checkpoint.as_deref(), &data, out)?;
            print!("{}", report.to_text());
        }
        Command::Infer { checkpoint, route_png, images } => {
            restore::infer_images(&cfg, &checkpoint, &images, out, &restore::InferOptions { route_png })?;
            info!("wrote {} images to {}", images.len(), out.display());
        }
        Command::Inspect { checkpoint, data } => {
            let rows = restore::inspect(&cfg, &checkpoint, &data, out)?;
            print!("{}", restore::cluster_summary(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
