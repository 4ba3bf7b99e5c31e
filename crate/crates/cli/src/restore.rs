//! Commands that load a trained model: eval, infer and inspect.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::{info, warn};
use psvae_core::metrics::{psnr, ImageMetrics};
use psvae_core::model::read_header;
use psvae_core::patching::{crop_to_fit, split};
use psvae_core::trainer::infer;
use psvae_core::{MetricReport, ModelParams, PatchGridSpec, Precision, Real, Tensor};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::load_pairs;
use crate::error::{CliError, CliResult};
use crate::imageio::{self, stem};
use crate::train::load_model;

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_TXT: &str = "metrics.txt";
pub const CLUSTERS_CSV: &str = "clusters.csv";

fn checkpoint_precision(path: &Path) -> CliResult<Precision> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let header = read_header(&mut BufReader::new(f)).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(header.precision)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Integer matrix, one grid row per line.
fn route_matrix(routes: &[usize], cols: usize) -> String {
    routes
        .chunks(cols)
        .map(|row| row.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

fn write_metrics(out: &Path, report: &MetricReport) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let path = out.join(METRICS_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
    for row in report.images.iter().chain(&report.mean) {
        w.serialize(row).map_err(|e| CliError::io(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    write_text(&out.join(METRICS_TXT), &report.to_text())
}

/// Scores restored images against the clean references. Without a
/// checkpoint the noisy inputs themselves are scored.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, data: &Path, out: &Path) -> CliResult<MetricReport> {
    let report = match checkpoint {
        None => eval_typed::<f64>(cfg, None, data)?,
        Some(p) => match checkpoint_precision(p)? {
            Precision::F32 => eval_typed::<f32>(cfg, Some(load_model(p)?), data)?,
            Precision::F64 => eval_typed::<f64>(cfg, Some(load_model(p)?), data)?,
        },
    };
    write_metrics(out, &report)?;
    Ok(report)
}

fn eval_typed<T: Real>(cfg: &RunConfig, model: Option<ModelParams<T>>, data: &Path) -> CliResult<MetricReport> {
    let mut rc = cfg.clone();
    if let Some(m) = &model {
        rc.train.arch = m.arch.clone();
    }
    let pairs = load_pairs::<T>(data, &rc)?;
    let rows = pairs
        .par_iter()
        .map(|p| {
            let test = match &model {
                None => p.noisy.clone(),
                Some(m) => {
                    let spec = PatchGridSpec::for_image(m.arch.patch_size, rc.grid.overlap, &p.noisy)?;
                    infer(&p.noisy, m, &spec)?.0
                }
            };
            Ok(ImageMetrics::compute(p.id.clone(), &p.clean, &test, &cfg.metrics)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(MetricReport::new(cfg.metrics.clone(), rows))
}

pub struct InferOptions {
    pub route_png: bool,
}

/// Restores each image; writes `<stem>.png` and `<stem>_routes.txt`.
pub fn infer_images(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf], out: &Path, opts: &InferOptions) -> CliResult<()> {
    match checkpoint_precision(checkpoint)? {
        Precision::F32 => infer_typed::<f32>(cfg, &load_model(checkpoint)?, images, out, opts),
        Precision::F64 => infer_typed::<f64>(cfg, &load_model(checkpoint)?, images, out, opts),
    }
}

fn fit<T: Real>(img: Tensor<T>, cfg: &RunConfig, patch: usize, path: &Path) -> CliResult<Tensor<T>> {
    let spec_ok = PatchGridSpec::for_image(patch, cfg.grid.overlap, &img).is_ok();
    if spec_ok || !cfg.grid.crop_to_fit {
        return Ok(img);
    }
    let cropped = crop_to_fit(&img, patch, cfg.grid.overlap)?;
    warn!("{}: cropped {:?} to {:?} to fit the patch grid", path.display(), img.shape(), cropped.shape());
    Ok(cropped)
}

fn infer_typed<T: Real>(cfg: &RunConfig, model: &ModelParams<T>, images: &[PathBuf], out: &Path, opts: &InferOptions) -> CliResult<()> {
    let d = model.arch.patch_size;
    images.par_iter().try_for_each(|path| {
        let img = fit(imageio::load::<T>(path)?, cfg, d, path)?;
        let spec = PatchGridSpec::for_image(d, cfg.grid.overlap, &img)?;
        let (restored, routes) = infer(&img, model, &spec)?;
        let id = stem(path);
        imageio::save(&restored, &out.join(format!("{id}.png")))?;
        write_text(&out.join(format!("{id}_routes.txt")), &route_matrix(&routes, spec.grid_cols()))?;
        if opts.route_png {
            let overlay = imageio::route_overlay(&restored, &routes, spec.grid_cols(), spec.stride())?;
            imageio::save_rgb(&overlay, &out.join(format!("{id}_routes.png")))?;
        }
        info!("{}: {} patches", path.display(), routes.len());
        Ok(())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterRow {
    pub cluster: usize,
    pub patches: usize,
    pub share: f64,
    /// Mean over patches of noisy-vs-clean PSNR; identical patches are skipped.
    pub mean_noisy_psnr: f64,
    pub mean_restored_psnr: f64,
}

/// Per-cluster counts and patch PSNR, plus one route matrix per image.
///
/// Clusters are the encoder's argmax labels, so a single-decoder model
/// still reports how the encoder partitions the data.
pub fn inspect(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> CliResult<Vec<ClusterRow>> {
    let rows = match checkpoint_precision(checkpoint)? {
        Precision::F32 => inspect_typed::<f32>(cfg, &load_model(checkpoint)?, data, out)?,
        Precision::F64 => inspect_typed::<f64>(cfg, &load_model(checkpoint)?, data, out)?,
    };
    let path = out.join(CLUSTERS_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::io(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}

struct PatchStat {
    cluster: usize,
    noisy_db: f64,
    restored_db: f64,
}

fn inspect_typed<T: Real>(cfg: &RunConfig, model: &ModelParams<T>, data: &Path, out: &Path) -> CliResult<Vec<ClusterRow>> {
    let mut rc = cfg.clone();
    rc.train.arch = model.arch.clone();
    let pairs = load_pairs::<T>(data, &rc)?;
    let d = model.arch.patch_size;
    let per_image = pairs
        .par_iter()
        .map(|p| {
            let spec = PatchGridSpec::for_image(d, rc.grid.overlap, &p.noisy)?;
            let (restored, _) = infer(&p.noisy, model, &spec)?;
            let noisy = split(&p.noisy, &spec)?;
            let refs: Vec<&Tensor<T>> = noisy.iter().map(|r| &r.data).collect();
            let codes = model.encode_deterministic(&Tensor::stack(&refs)?)?;
            let clean = split(&p.clean, &spec)?;
            let rest = split(&restored, &spec)?;
            let stats = codes
                .iter()
                .zip(noisy.iter().zip(clean.iter().zip(&rest)))
                .map(|(c, (n, (cl, r)))| {
                    Ok(PatchStat {
                        cluster: c.route,
                        noisy_db: psnr(&cl.data, &n.data, 1.0)?,
                        restored_db: psnr(&cl.data, &r.data, 1.0)?,
                    })
                })
                .collect::<CliResult<Vec<_>>>()?;
            let routes: Vec<usize> = stats.iter().map(|s| s.cluster).collect();
            write_text(&out.join("routes").join(format!("{}.txt", p.id)), &route_matrix(&routes, spec.grid_cols()))?;
            Ok(stats)
        })
        .collect::<CliResult<Vec<_>>>()?;

    let stats: Vec<PatchStat> = per_image.into_iter().flatten().collect();
    let total = stats.len();
    let finite_mean = |v: Vec<f64>| {
        let f: Vec<f64> = v.into_iter().filter(|x| x.is_finite()).collect();
        if f.is_empty() {
            f64::NAN
        } else {
            f.iter().sum::<f64>() / f.len() as f64
        }
    };
    let rows = (0..model.components())
        .map(|k| {
            let mine: Vec<&PatchStat> = stats.iter().filter(|s| s.cluster == k).collect();
            ClusterRow {
                cluster: k,
                patches: mine.len(),
                share: mine.len() as f64 / total as f64,
                mean_noisy_psnr: finite_mean(mine.iter().map(|s| s.noisy_db).collect()),
                mean_restored_psnr: finite_mean(mine.iter().map(|s| s.restored_db).collect()),
            }
        })
        .collect();
    Ok(rows)
}

pub fn cluster_summary(rows: &[ClusterRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(
            s,
            "cluster {}: {} patches ({:.1}%), noisy {:.2} dB, restored {:.2} dB",
            r.cluster,
            r.patches,
            100.0 * r.share,
            r.mean_noisy_psnr,
            r.mean_restored_psnr
        );
    }
    s
}
