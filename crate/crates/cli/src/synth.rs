use std::path::{Path, PathBuf};

use log::{info, warn};
use psvae_core::metrics::psnr;
use psvae_core::patching::crop_to_fit;
use psvae_core::rng::{stream, substream};
use psvae_core::synth::{calibrate_to_psnr, corrupt, CalibrationProbe};
use psvae_core::{ArtifactModel, Tensor};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::imageio::{self, list_pngs, stem};
use crate::manifest::{self, CalibrationRecord, ManifestRow, CALIBRATION, MANIFEST};

pub const CLEAN_DIR: &str = "clean";
pub const NOISY_DIR: &str = "noisy";

/// Synthesis always runs in 64-bit; images are 8-bit on disk anyway.
type Img = Tensor<f64>;

struct Source {
    id: String,
    path: PathBuf,
    image: Img,
}

fn load_sources(dir: &Path, cfg: &RunConfig) -> CliResult<Vec<Source>> {
    let mut out = Vec::new();
    for path in list_pngs(dir)? {
        let image = match imageio::load::<f64>(&path) {
            Ok(i) => i,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let image = if cfg.grid.crop_to_fit {
            match crop_to_fit(&image, cfg.train.arch.patch_size, cfg.grid.overlap) {
                Ok(i) => i,
                Err(e) => {
                    warn!("skipping {}: {e}", path.display());
                    continue;
                }
            }
        } else {
            image
        };
        out.push(Source { id: stem(&path), path, image });
    }
    if out.is_empty() {
        return Err(CliError::Io(format!("no usable PNG images in {}", dir.display())));
    }
    Ok(out)
}

fn corrupt_one(clean: &Img, model: &ArtifactModel, seed: u64) -> CliResult<Img> {
    let noisy = corrupt(clean, model, &mut substream(seed, stream::NOISE))?;
    Ok(imageio::quantized(&noisy))
}

fn write_pair(out: &Path, id: &str, clean: &Img, noisy: &Img) -> CliResult<()> {
    imageio::save(clean, &out.join(CLEAN_DIR).join(format!("{id}.png")))?;
    imageio::save(noisy, &out.join(NOISY_DIR).join(format!("{id}.png")))
}

/// Corrupts every PNG in `clean_dir` and writes pairs plus a manifest to `out`.
pub fn run(cfg: &RunConfig, clean_dir: &Path, out: &Path) -> CliResult<CalibrationRecord> {
    cfg.validate()?;
    let sources = load_sources(clean_dir, cfg)?;
    info!("{} source images", sources.len());

    let base = cfg.synth.params;
    let (params, factor, probe_db) = match cfg.synth.calibrate.then_some(cfg.synth.target_psnr) {
        Some(target) => {
            let n = cfg.synth.probe_images.clamp(1, sources.len());
            let images: Vec<Img> = sources[..n].iter().map(|s| s.image.clone()).collect();
            let probe = CalibrationProbe { images: &images, kinds: cfg.synth.kinds.clone(), seed: cfg.seed };
            let cal = calibrate_to_psnr(target, base, &probe)?;
            info!("calibrated factor {:.4}: probe mean {:.3} dB for target {target} dB", cal.factor, cal.achieved_db);
            (cal.params, cal.factor, Some(cal.achieved_db))
        }
        None => (base, 1.0, None),
    };

    let rows = sources
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = cfg.seed.wrapping_add(i as u64);
            let [h, w, _] = <[usize; 3]>::try_from(s.image.shape()).expect("images are [H,W,C]");
            let model =
                ArtifactModel::sample(h, w, &cfg.synth.kinds, params, cfg.synth.mask_mode, &mut substream(seed, stream::SYNTH))?;
            let noisy = corrupt_one(&s.image, &model, seed)?;
            write_pair(out, &s.id, &s.image, &noisy)?;
            let db = psnr(&s.image, &noisy, 1.0)?;
            Ok(ManifestRow::new(s.id.clone(), s.path.display().to_string(), seed, &model, db))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / rows.len() as f64;
    manifest::write_rows(&out.join(MANIFEST), &rows)?;
    let rec = CalibrationRecord {
        seed: cfg.seed,
        target_db: cfg.synth.calibrate.then_some(cfg.synth.target_psnr),
        factor,
        probe_achieved_db: probe_db,
        base,
        params,
        images: rows.len(),
        mean_psnr,
    };
    manifest::write_calibration(&out.join(CALIBRATION), &rec)?;
    Ok(rec)
}

/// Rebuilds every noisy image recorded in `manifest_path` into `out`.
pub fn replay(manifest_path: &Path, out: &Path) -> CliResult<f64> {
    let rows = manifest::read_rows(manifest_path)?;
    if rows.is_empty() {
        return Err(CliError::Config(format!("{} lists no images", manifest_path.display())));
    }
    let psnrs = rows
        .par_iter()
        .map(|row| {
            let src = Path::new(&row.source);
            let full = imageio::load::<f64>(src)?;
            let clean = crop_top_left(&full, row.height, row.width)
                .ok_or_else(|| CliError::Config(format!("{} is smaller than its manifest entry", src.display())))?;
            let noisy = corrupt_one(&clean, &row.artifact_model()?, row.seed)?;
            write_pair(out, &row.id, &clean, &noisy)?;
            Ok(psnr(&clean, &noisy, 1.0)?)
        })
        .collect::<CliResult<Vec<f64>>>()?;
    manifest::write_rows(&out.join(MANIFEST), &rows)?;
    Ok(psnrs.iter().sum::<f64>() / psnrs.len() as f64)
}

fn crop_top_left(img: &Img, h: usize, w: usize) -> Option<Img> {
    let [ih, iw, c] = <[usize; 3]>::try_from(img.shape()).ok()?;
    if h > ih || w > iw {
        return None;
    }
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        data.extend_from_slice(&img.data()[y * iw * c..(y * iw + w) * c]);
    }
    Tensor::new(&[h, w, c], data).ok()
}
