use std::path::Path;

use psvae_core::patching::crop_to_fit;
use psvae_core::{Real, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::imageio::{self, list_pngs, stem};
use crate::synth::{CLEAN_DIR, NOISY_DIR};

pub struct Pair<T> {
    pub id: String,
    pub noisy: Tensor<T>,
    pub clean: Tensor<T>,
}

/// `noisy/*.png` matched by file name against `clean/*.png`.
pub fn load_pairs<T: Real>(dir: &Path, cfg: &RunConfig) -> CliResult<Vec<Pair<T>>> {
    let noisy_dir = dir.join(NOISY_DIR);
    let clean_dir = dir.join(CLEAN_DIR);
    let mut out = Vec::new();
    for path in list_pngs(&noisy_dir)? {
        let name = path.file_name().expect("listed files have names");
        let mut noisy = imageio::load::<T>(&path)?;
        let mut clean = imageio::load::<T>(&clean_dir.join(name))?;
        if noisy.shape() != clean.shape() {
            return Err(CliError::Config(format!(
                "{}: noisy {:?} and clean {:?} differ in size",
                name.to_string_lossy(),
                noisy.shape(),
                clean.shape()
            )));
        }
        if cfg.grid.crop_to_fit {
            noisy = crop_to_fit(&noisy, cfg.train.arch.patch_size, cfg.grid.overlap)?;
            clean = crop_to_fit(&clean, cfg.train.arch.patch_size, cfg.grid.overlap)?;
        }
        out.push(Pair { id: stem(&path), noisy, clean });
    }
    if out.is_empty() {
        return Err(CliError::Io(format!("no image pairs under {}", dir.display())));
    }
    Ok(out)
}
