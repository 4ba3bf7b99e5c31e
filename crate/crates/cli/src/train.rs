use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use clap::ValueEnum;
use log::{info, warn};
use psvae_core::model::{read_checkpoint, write_checkpoint};
use psvae_core::trainer::{train_stage1, train_stage2, PatchDataset};
use psvae_core::{ModelParams, Precision, Real, TrainReport};

use crate::config::RunConfig;
use crate::data::load_pairs;
use crate::error::{CliError, CliResult};

pub const STAGE1_CHECKPOINT: &str = "stage1.psvae";
pub const MODEL_CHECKPOINT: &str = "model.psvae";
pub const REPORT: &str = "train_report.txt";
pub const RESOLVED_CONFIG: &str = "run_config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Both,
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

pub fn save_model<T: Real>(params: &ModelParams<T>, path: &Path) -> CliResult<()> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(params, &mut w)?;
    std::io::Write::flush(&mut w).map_err(|e| CliError::io(path, e))
}

pub fn load_model<T: Real>(path: &Path) -> CliResult<ModelParams<T>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f)).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn run(cfg: &RunConfig, data: &Path, out: &Path, stage: Stage, init: Option<&Path>) -> CliResult<TrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    std::fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()).map_err(|e| CliError::io(out, e))?;
    match cfg.train.precision {
        Precision::F32 => run_typed::<f32>(cfg, data, out, stage, init),
        Precision::F64 => run_typed::<f64>(cfg, data, out, stage, init),
    }
}

fn run_typed<T: Real>(cfg: &RunConfig, data: &Path, out: &Path, stage: Stage, init: Option<&Path>) -> CliResult<TrainReport> {
    let pairs: Vec<_> = load_pairs::<T>(data, cfg)?.into_iter().map(|p| (p.noisy, p.clean)).collect();
    let dataset = PatchDataset::from_pairs(&pairs, cfg.train.arch.patch_size, cfg.grid.overlap)?;
    drop(pairs);
    info!("{} training patches", dataset.len());

    let mut tcfg = cfg.train.clone();
    if tcfg.checkpoint_every > 0 && tcfg.checkpoint_dir.is_none() {
        tcfg.checkpoint_dir = Some(out.join("checkpoints"));
    }

    let mut report = TrainReport::default();
    let frozen = if stage == Stage::Two {
        let path = init.map(Path::to_path_buf).unwrap_or_else(|| out.join(STAGE1_CHECKPOINT));
        let frozen = load_model::<T>(&path)?;
        if frozen.arch != tcfg.arch || frozen.components() != tcfg.components || frozen.latent_dim() != tcfg.latent_dim {
            return Err(CliError::Config(format!(
                "{} was trained with {} (S={}, dz={}), config asks for {} (S={}, dz={})",
                path.display(),
                frozen.arch,
                frozen.components(),
                frozen.latent_dim(),
                tcfg.arch,
                tcfg.components,
                tcfg.latent_dim
            )));
        }
        frozen
    } else {
        let (frozen, r1) = train_stage1(&dataset, &tcfg)?;
        info!("stage 1 finished in {:.1}s", r1.stage1.seconds);
        save_model(&frozen, &out.join(STAGE1_CHECKPOINT))?;
        report.stage1 = r1.stage1;
        frozen
    };

    if stage != Stage::One {
        let (model, r2) = train_stage2(&dataset, &frozen, &tcfg)?;
        info!("stage 2 finished in {:.1}s", r2.stage2.seconds);
        for w in &r2.warnings {
            warn!("{w}");
        }
        save_model(&model, &out.join(MODEL_CHECKPOINT))?;
        report.stage2 = r2.stage2;
        report.warnings = r2.warnings;
    }
    let path = out.join(REPORT);
    std::fs::write(&path, report.to_text()).map_err(|e| CliError::io(&path, e))?;
    Ok(report)
}
