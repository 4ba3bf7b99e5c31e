//! Run configuration: one TOML file, overridden by command-line flags.
//!
//! ```toml
//! seed = 0
//!
//! [grid]
//! overlap = 4
//! crop_to_fit = true
//!
//! [synth]
//! calibrate = true          # false: use `params` as given
//! target_psnr = 16.64
//! probe_images = 20
//! kinds = ["gaussian", "poisson", "salt_pepper"]
//! mask_mode = "random"
//! params = { gaussian_sigma = 0.1, poisson_scale = 20.0, salt_pepper_density = 0.1 }
//!
//! [train]
//! arch = "srgb;d=16;c=3;enc=16,32,32,64,64;hidden=128;dec=64,64,32,32,16"
//! batch_size = 128
//! epochs_stage1 = 50
//! epochs_stage2 = 50
//! components = 4
//! decoders = 4
//! latent_dim = 64
//! precision = "f32"
//! loss = { beta = 0.1, lambda_y = 1.0, lambda_reg = 1e-5, kl_mode = "soft" }
//! schedule = { initial_rate = 0.001, decay_factor = 0.9, decay_steps = 1000 }
//!
//! [metrics]
//! ssim_window = 11
//! ```
//!
//! Every section and key is optional.

use std::path::Path;

use psvae_core::metrics::MetricConfig;
use psvae_core::synth::MaskMode;
use psvae_core::{NoiseKind, NoiseParams, Precision, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub overlap: usize,
    /// Crop images at the bottom and right until the patch grid tiles them.
    pub crop_to_fit: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { overlap: 4, crop_to_fit: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Scale `params` until the probe images reach `target_psnr`.
    pub calibrate: bool,
    pub target_psnr: f64,
    pub probe_images: usize,
    pub kinds: Vec<NoiseKind>,
    pub mask_mode: MaskMode,
    pub params: NoiseParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            calibrate: true,
            target_psnr: 16.64,
            probe_images: 20,
            kinds: NoiseKind::ALL.to_vec(),
            mask_mode: MaskMode::Random,
            params: NoiseParams::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub metrics: MetricConfig,
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub decoders: Option<usize>,
    pub beta: Option<f64>,
    pub patch_size: Option<usize>,
    pub overlap: Option<usize>,
    pub precision: Option<Precision>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Applies flag overrides; the top-level seed is the one the trainer sees.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(k) = o.decoders {
            self.train.decoders = k;
        }
        if let Some(b) = o.beta {
            self.train.loss.beta = b;
        }
        if let Some(d) = o.patch_size {
            self.train.arch.patch_size = d;
        }
        if let Some(ov) = o.overlap {
            self.grid.overlap = ov;
        }
        if let Some(p) = o.precision {
            self.train.precision = p;
        }
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        let d = self.train.arch.patch_size;
        if self.grid.overlap >= d {
            return Err(CliError::Config(format!("overlap {} must be below patch size {d}", self.grid.overlap)));
        }
        if self.synth.kinds.is_empty() {
            return Err(CliError::Config("synth.kinds is empty".into()));
        }
        self.synth.params.validate()?;
        Ok(())
    }
}
