//! Dataset manifest: one CSV row per synthesized image plus a TOML
//! calibration record next to it.

use std::path::Path;

use psvae_core::synth::{ArtifactComponent, MaskRect};
use psvae_core::{ArtifactModel, NoiseKind, NoiseParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.csv";
pub const CALIBRATION: &str = "calibration.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub source: String,
    /// Extents after cropping; the crop keeps the top-left corner.
    pub height: usize,
    pub width: usize,
    /// Seed of the image's noise stream.
    pub seed: u64,
    /// `kind:y0,x0,h,w` entries joined by `;`.
    pub components: String,
    pub gaussian_sigma: f64,
    pub poisson_scale: f64,
    pub salt_pepper_density: f64,
    pub psnr: f64,
}

impl ManifestRow {
    pub fn new(id: String, source: String, seed: u64, model: &ArtifactModel, psnr: f64) -> Self {
        let components = model
            .components
            .iter()
            .map(|c| {
                let m = c.mask;
                format!("{}:{},{},{},{}", c.kind.name(), m.y0, m.x0, m.height, m.width)
            })
            .collect::<Vec<_>>()
            .join(";");
        ManifestRow {
            id,
            source,
            height: model.height,
            width: model.width,
            seed,
            components,
            gaussian_sigma: model.params.gaussian_sigma,
            poisson_scale: model.params.poisson_scale,
            salt_pepper_density: model.params.salt_pepper_density,
            psnr,
        }
    }

    pub fn artifact_model(&self) -> CliResult<ArtifactModel> {
        let bad = |what: &str| CliError::Config(format!("manifest row `{}`: bad component `{what}`", self.id));
        let components = self
            .components
            .split(';')
            .map(|entry| {
                let (kind, rect) = entry.split_once(':').ok_or_else(|| bad(entry))?;
                let kind: NoiseKind = kind.parse().map_err(|_| bad(entry))?;
                let v: Vec<usize> = rect.split(',').map(|x| x.parse()).collect::<Result<_, _>>().map_err(|_| bad(entry))?;
                let [y0, x0, height, width] = <[usize; 4]>::try_from(v.as_slice()).map_err(|_| bad(entry))?;
                Ok(ArtifactComponent { kind, mask: MaskRect { y0, x0, height, width } })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let model = ArtifactModel {
            height: self.height,
            width: self.width,
            components,
            params: NoiseParams {
                gaussian_sigma: self.gaussian_sigma,
                poisson_scale: self.poisson_scale,
                salt_pepper_density: self.salt_pepper_density,
            },
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub seed: u64,
    pub target_db: Option<f64>,
    pub factor: f64,
    pub probe_achieved_db: Option<f64>,
    pub base: NoiseParams,
    pub params: NoiseParams,
    pub images: usize,
    /// Mean PSNR of the written 8-bit noisy images.
    pub mean_psnr: f64,
}

pub fn write_rows(path: &Path, rows: &[ManifestRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_rows(path: &Path) -> CliResult<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| CliError::Config(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn write_calibration(path: &Path, rec: &CalibrationRecord) -> CliResult<()> {
    let text = toml::to_string(rec).expect("calibration record serializes");
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
