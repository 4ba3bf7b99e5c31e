//! Full-reference image quality metrics on `[H, W, C]` images.
//!
//! Everything is accumulated in f64 whatever the storage precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Window and stabilizer settings, echoed into reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub uqi_window: usize,
    pub ms_ssim_weights: Vec<f64>,
    /// Smallest extent allowed at the coarsest MS-SSIM scale. The Gaussian
    /// window is truncated to the scale's extent when it does not fit.
    pub ms_ssim_min_extent: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            ssim_window: 11,
            ssim_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            uqi_window: 8,
            ms_ssim_weights: MS_SSIM_WEIGHTS.to_vec(),
            ms_ssim_min_extent: 4,
        }
    }
}

fn image_dims<T: Real>(op: &'static str, x: &Tensor<T>, y: &Tensor<T>) -> Result<[usize; 3]> {
    if x.shape() != y.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    <[usize; 3]>::try_from(x.shape()).map_err(|_| Error::dim(op, format!("expected [H,W,C], got {:?}", x.shape())))
}

/// Peak signal-to-noise ratio in dB; identical images give `+inf`.
pub fn psnr<T: Real>(x: &Tensor<T>, y: &Tensor<T>, max_val: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::dim("psnr", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    if !(max_val > 0.0) {
        return Err(Error::Domain(format!("psnr: max_val {max_val} must be > 0")));
    }
    if x.is_empty() {
        return Err(Error::dim("psnr", "empty image".to_string()));
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// One channel as a row-major f64 plane.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channel<T: Real>(img: &Tensor<T>, ch: usize) -> Plane {
        let [h, w, c] = [img.shape()[0], img.shape()[1], img.shape()[2]];
        let v = img.data().iter().skip(ch).step_by(c).map(|x| x.to_f64_lossy()).collect();
        Plane { h, w, v }
    }

    fn mul(&self, other: &Plane) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&other.v).map(|(a, b)| a * b).collect() }
    }

    /// Valid-region correlation with the separable kernel `k (x) k`.
    fn filter(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (oh, ow) = (self.h + 1 - n, self.w + 1 - n);
        let mut rows = vec![0.0; self.h * ow];
        for y in 0..self.h {
            let src = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = k.iter().enumerate().map(|(i, a)| a * rows[(y + i) * ow + x]).sum();
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    fn avg_pool2(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let at = |dy: usize, dx: usize| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v.push(0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)));
            }
        }
        Plane { h, w, v }
    }
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM and mean contrast-structure term for one channel pair.
fn ssim_plane(x: &Plane, y: &Plane, k: &[f64], c1: f64, c2: f64) -> (f64, f64) {
    let mx = x.filter(k);
    let my = y.filter(k);
    let sxx = x.mul(x).filter(k);
    let syy = y.mul(y).filter(k);
    let sxy = x.mul(y).filter(k);
    let n = mx.v.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mx.v.len() {
        let (ux, uy) = (mx.v[i], my.v[i]);
        let vx = sxx.v[i] - ux * ux;
        let vy = syy.v[i] - uy * uy;
        let cov = sxy.v[i] - ux * uy;
        let l = (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
        let c = (2.0 * cov + c2) / (vx + vy + c2);
        ssim += l * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

pub fn ssim<T: Real>(x: &Tensor<T>, y: &Tensor<T>, max_val: f64) -> Result<f64> {
    ssim_with(x, y, max_val, &MetricConfig::default())
}

pub fn ssim_with<T: Real>(x: &Tensor<T>, y: &Tensor<T>, max_val: f64, cfg: &MetricConfig) -> Result<f64> {
    let [h, w, c] = image_dims("ssim", x, y)?;
    if h < cfg.ssim_window || w < cfg.ssim_window {
        return Err(Error::Contract(format!("ssim: {h}x{w} image is smaller than the {0}x{0} window", cfg.ssim_window)));
    }
    let k = gaussian_kernel(cfg.ssim_window, cfg.ssim_sigma);
    let (c1, c2) = ((cfg.k1 * max_val).powi(2), (cfg.k2 * max_val).powi(2));
    let total: f64 = (0..c)
        .map(|ch| ssim_plane(&Plane::channel(x, ch), &Plane::channel(y, ch), &k, c1, c2).0)
        .sum();
    Ok(total / c as f64)
}

/// Universal quality index over 8x8 uniform windows.
///
/// Windows where a denominator vanishes fall back to the remaining factor,
/// and to 1 when both vanish.
pub fn uqi<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    uqi_with(x, y, &MetricConfig::default())
}

pub fn uqi_with<T: Real>(x: &Tensor<T>, y: &Tensor<T>, cfg: &MetricConfig) -> Result<f64> {
    let [h, w, c] = image_dims("uqi", x, y)?;
    let n = cfg.uqi_window;
    if h < n || w < n {
        return Err(Error::Contract(format!("uqi: {h}x{w} image is smaller than the {n}x{n} window")));
    }
    let k = vec![1.0 / n as f64; n];
    let mut total = 0.0;
    for ch in 0..c {
        let (px, py) = (Plane::channel(x, ch), Plane::channel(y, ch));
        let mx = px.filter(&k);
        let my = py.filter(&k);
        let sxx = px.mul(&px).filter(&k);
        let syy = py.mul(&py).filter(&k);
        let sxy = px.mul(&py).filter(&k);
        let mut acc = 0.0;
        for i in 0..mx.v.len() {
            let (ux, uy) = (mx.v[i], my.v[i]);
            let var_sum = (sxx.v[i] - ux * ux) + (syy.v[i] - uy * uy);
            let cov = sxy.v[i] - ux * uy;
            let mean_sq = ux * ux + uy * uy;
            acc += uqi_window_value(ux, uy, var_sum, cov, mean_sq);
        }
        total += acc / mx.v.len() as f64;
    }
    Ok(total / c as f64)
}

// Float sums of identical values can leave residue around 1e-17 where the
// exact variance is zero.
const UQI_ZERO: f64 = 1e-12;

fn uqi_window_value(ux: f64, uy: f64, var_sum: f64, cov: f64, mean_sq: f64) -> f64 {
    let var_zero = var_sum.abs() <= UQI_ZERO;
    let mean_zero = mean_sq <= UQI_ZERO;
    match (var_zero, mean_zero) {
        (true, true) => 1.0,
        (true, false) => 2.0 * ux * uy / mean_sq,
        (false, true) => 2.0 * cov / var_sum,
        (false, false) => 4.0 * cov * ux * uy / (var_sum * mean_sq),
    }
}

pub fn ms_ssim<T: Real>(x: &Tensor<T>, y: &Tensor<T>, max_val: f64) -> Result<f64> {
    ms_ssim_with(x, y, max_val, &MetricConfig::default())
}

/// Multi-scale SSIM with `cfg.ms_ssim_weights.len()` scales.
///
/// Negative per-scale terms are clamped to zero before the weighted
/// product so fractional powers stay real.
pub fn ms_ssim_with<T: Real>(x: &Tensor<T>, y: &Tensor<T>, max_val: f64, cfg: &MetricConfig) -> Result<f64> {
    let [h, w, c] = image_dims("ms_ssim", x, y)?;
    let weights = &cfg.ms_ssim_weights;
    if weights.is_empty() {
        return Err(Error::Config("ms_ssim needs at least one scale weight".into()));
    }
    let levels = weights.len();
    let factor = 1usize << (levels - 1);
    let (ch, cw) = (h / factor, w / factor);
    let floor = cfg.ms_ssim_min_extent.max(1);
    if ch < floor || cw < floor {
        return Err(Error::Contract(format!(
            "ms_ssim: {h}x{w} image cannot be downsampled {} times to at least {floor}x{floor}",
            levels - 1
        )));
    }
    let (c1, c2) = ((cfg.k1 * max_val).powi(2), (cfg.k2 * max_val).powi(2));
    let mut total = 0.0;
    for chan in 0..c {
        let (mut px, mut py) = (Plane::channel(x, chan), Plane::channel(y, chan));
        let mut value = 1.0;
        for (level, &wt) in weights.iter().enumerate() {
            let size = cfg.ssim_window.min(px.h).min(px.w);
            let k = gaussian_kernel(size, cfg.ssim_sigma);
            let (s, cs) = ssim_plane(&px, &py, &k, c1, c2);
            let term = if level + 1 == levels { s } else { cs };
            value *= term.max(0.0).powf(wt);
            if level + 1 < levels {
                px = px.avg_pool2();
                py = py.avg_pool2();
            }
        }
        total += value;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub uqi: f64,
    pub ms_ssim: f64,
}

impl ImageMetrics {
    pub fn compute<T: Real>(image_id: impl Into<String>, reference: &Tensor<T>, test: &Tensor<T>, cfg: &MetricConfig) -> Result<Self> {
        Ok(ImageMetrics {
            image_id: image_id.into(),
            psnr: psnr(reference, test, 1.0)?,
            ssim: ssim_with(reference, test, 1.0, cfg)?,
            uqi: uqi_with(reference, test, cfg)?,
            ms_ssim: ms_ssim_with(reference, test, 1.0, cfg)?,
        })
    }
}

/// Per-image scores plus their arithmetic means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: MetricConfig,
    pub images: Vec<ImageMetrics>,
    pub mean: Option<ImageMetrics>,
}

impl MetricReport {
    pub fn new(config: MetricConfig, images: Vec<ImageMetrics>) -> Self {
        let mean = (!images.is_empty()).then(|| {
            let n = images.len() as f64;
            let avg = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
            ImageMetrics {
                image_id: "mean".into(),
                psnr: avg(|m| m.psnr),
                ssim: avg(|m| m.ssim),
                uqi: avg(|m| m.uqi),
                ms_ssim: avg(|m| m.ms_ssim),
            }
        });
        MetricReport { config, images, mean }
    }

    /// Human-readable summary; the constants in use come first.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "ssim_window = {}\nssim_sigma = {}\nk1 = {}\nk2 = {}\nuqi_window = {}\nms_ssim_weights = {:?}\nimages = {}\n",
            c.ssim_window,
            c.ssim_sigma,
            c.k1,
            c.k2,
            c.uqi_window,
            c.ms_ssim_weights,
            self.images.len()
        );
        if let Some(m) = &self.mean {
            s += &format!(
                "mean_psnr = {:.4}\nmean_ssim = {:.6}\nmean_uqi = {:.6}\nmean_ms_ssim = {:.6}\n",
                m.psnr, m.ssim, m.uqi, m.ms_ssim
            );
        }
        s
    }
}
