//! Heterogeneous artifact synthesis.
//!
//! An observed image is the clean image plus a sum of noise fields, each
//! confined to its own (possibly overlapping) rectangular region:
//! `I_obs = clamp(I_gt + sum_s N_s * M_s, 0, 1)`. Signal-dependent kinds are
//! expressed through their residual so the composition stays additive.

mod scenes;

pub use scenes::face_like_scene;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::rng::{stream, substream};
use crate::tensor::{Real, Tensor};

pub const MIN_MASK_FRACTION: f64 = 0.15;
pub const MAX_MASK_FRACTION: f64 = 0.60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Poisson,
    SaltPepper,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Gaussian, NoiseKind::Poisson, NoiseKind::SaltPepper];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Poisson => "poisson",
            NoiseKind::SaltPepper => "salt_pepper",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise kind `{s}`")))
    }
}

/// Per-kind noise magnitudes on the `[0, 1]` intensity scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// Standard deviation of additive Gaussian noise.
    pub gaussian_sigma: f64,
    /// Photon scale: observed = Pois(I * scale) / scale. Larger is cleaner;
    /// `inf` disables the kind.
    pub poisson_scale: f64,
    /// Fraction of pixels replaced by 0 or 1.
    pub salt_pepper_density: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            gaussian_sigma: 0.1,
            poisson_scale: 20.0,
            salt_pepper_density: 0.1,
        }
    }
}

impl NoiseParams {
    pub fn zero() -> Self {
        NoiseParams {
            gaussian_sigma: 0.0,
            poisson_scale: f64::INFINITY,
            salt_pepper_density: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma >= 0.0) || !self.gaussian_sigma.is_finite() {
            return Err(Error::Domain(format!("gaussian sigma {} must be >= 0", self.gaussian_sigma)));
        }
        if !(self.poisson_scale > 0.0) {
            return Err(Error::Domain(format!("poisson scale {} must be > 0", self.poisson_scale)));
        }
        if !(0.0..=1.0).contains(&self.salt_pepper_density) {
            return Err(Error::Domain(format!(
                "salt-and-pepper density {} must lie in [0, 1]",
                self.salt_pepper_density
            )));
        }
        Ok(())
    }

    /// Scales every kind's severity by `factor` (0 = clean). Density
    /// saturates at 1.
    pub fn scaled(&self, factor: f64) -> Self {
        NoiseParams {
            gaussian_sigma: self.gaussian_sigma * factor,
            poisson_scale: if factor > 0.0 { self.poisson_scale / factor } else { f64::INFINITY },
            salt_pepper_density: (self.salt_pepper_density * factor).min(1.0),
        }
    }
}

/// Axis-aligned rectangle; the binary mask it stands for is 1 inside.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRect {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl MaskRect {
    pub fn full(height: usize, width: usize) -> Self {
        MaskRect { y0: 0, x0: 0, height, width }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.height && x >= self.x0 && x < self.x0 + self.width
    }

    /// Binary `[H, W]` mask.
    pub fn to_mask<T: Real>(&self, height: usize, width: usize) -> Tensor<T> {
        let mut m = Tensor::zeros(&[height, width]);
        for y in self.y0..(self.y0 + self.height).min(height) {
            for x in self.x0..(self.x0 + self.width).min(width) {
                m.set(&[y, x], T::one());
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Random rectangles covering 15-60% of the frame each.
    Random,
    /// Every mask covers the whole frame.
    FullFrame,
}

/// One random rectangle with area fraction in `[0.15, 0.60]`.
pub fn sample_rect<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> MaskRect {
    let total = (height * width) as f64;
    for _ in 0..64 {
        let fraction = rng.random_range(MIN_MASK_FRACTION..MAX_MASK_FRACTION);
        let aspect = rng.random_range(0.5f64.ln()..2.0f64.ln()).exp();
        let h = ((fraction * total * aspect).sqrt().round() as usize).clamp(1, height);
        let w = ((fraction * total / h as f64).round() as usize).clamp(1, width);
        let got = (h * w) as f64 / total;
        if (MIN_MASK_FRACTION..=MAX_MASK_FRACTION).contains(&got) {
            let y0 = rng.random_range(0..=height - h);
            let x0 = rng.random_range(0..=width - w);
            return MaskRect { y0, x0, height: h, width: w };
        }
    }
    // Frames too small to realise the bounds on a pixel lattice.
    MaskRect::full(height, width)
}

pub fn sample_masks<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    count: usize,
    mode: MaskMode,
    rng: &mut R,
) -> Vec<MaskRect> {
    (0..count)
        .map(|_| match mode {
            MaskMode::Random => sample_rect(height, width, rng),
            MaskMode::FullFrame => MaskRect::full(height, width),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactComponent {
    pub kind: NoiseKind,
    pub mask: MaskRect,
}

/// Everything needed to corrupt one image, short of the noise draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactModel {
    pub height: usize,
    pub width: usize,
    pub components: Vec<ArtifactComponent>,
    pub params: NoiseParams,
}

impl ArtifactModel {
    /// One component per kind, each with its own random region.
    pub fn sample<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        kinds: &[NoiseKind],
        params: NoiseParams,
        mode: MaskMode,
        rng: &mut R,
    ) -> Result<Self> {
        let masks = sample_masks(height, width, kinds.len(), mode, rng);
        let model = ArtifactModel {
            height,
            width,
            components: kinds
                .iter()
                .zip(masks)
                .map(|(&kind, mask)| ArtifactComponent { kind, mask })
                .collect(),
            params,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config("artifact model needs at least one component".into()));
        }
        for c in &self.components {
            let m = c.mask;
            if m.y0 + m.height > self.height || m.x0 + m.width > self.width {
                return Err(Error::Config(format!("mask {m:?} exceeds {}x{} frame", self.height, self.width)));
            }
        }
        self.params.validate()
    }
}

/// Applies `model` to a clean `[H, W, C]` image with values in `[0, 1]`.
///
/// Noise draws happen only inside each component's mask, component by
/// component in row-major order, so the result is a pure function of the
/// inputs and the RNG state.
pub fn corrupt<T: Real, R: Rng + ?Sized>(clean: &Tensor<T>, model: &ArtifactModel, rng: &mut R) -> Result<Tensor<T>> {
    model.validate()?;
    let [h, w, c] = <[usize; 3]>::try_from(clean.shape())
        .map_err(|_| Error::dim("corrupt", format!("image must be [H,W,C], got {:?}", clean.shape())))?;
    if (h, w) != (model.height, model.width) {
        return Err(Error::dim(
            "corrupt",
            format!("image {h}x{w} vs artifact model {}x{}", model.height, model.width),
        ));
    }
    let gt = clean.data();
    let mut residual = vec![0.0f64; gt.len()];
    let p = model.params;
    for comp in &model.components {
        let m = comp.mask;
        for y in m.y0..m.y0 + m.height {
            for x in m.x0..m.x0 + m.width {
                for ch in 0..c {
                    let i = (y * w + x) * c + ch;
                    let v = gt[i].to_f64_lossy();
                    residual[i] += match comp.kind {
                        NoiseKind::Gaussian => {
                            let n: f64 = StandardNormal.sample(rng);
                            p.gaussian_sigma * n
                        }
                        NoiseKind::Poisson => {
                            let lambda = v * p.poisson_scale;
                            if !p.poisson_scale.is_finite() || lambda <= 0.0 {
                                0.0
                            } else {
                                let k: f64 = Poisson::new(lambda)
                                    .map_err(|e| Error::Domain(format!("poisson rate {lambda}: {e}")))?
                                    .sample(rng);
                                k / p.poisson_scale - v
                            }
                        }
                        NoiseKind::SaltPepper => {
                            let u: f64 = rng.random();
                            let d = p.salt_pepper_density;
                            if u < d / 2.0 {
                                -v
                            } else if u < d {
                                1.0 - v
                            } else {
                                0.0
                            }
                        }
                    };
                }
            }
        }
    }
    let data = gt
        .iter()
        .zip(&residual)
        .map(|(&v, &r)| {
            if r == 0.0 {
                v
            } else {
                T::from_f64((v.to_f64_lossy() + r).clamp(0.0, 1.0))
            }
        })
        .collect();
    Tensor::new(clean.shape(), data)
}

/// Fixed set of clean images and noise seeds used to measure the PSNR a
/// given set of noise parameters produces.
pub struct CalibrationProbe<'a, T> {
    pub images: &'a [Tensor<T>],
    pub kinds: Vec<NoiseKind>,
    pub seed: u64,
}

/// Outcome of [`calibrate_to_psnr`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: NoiseParams,
    /// Severity multiplier applied to the base parameters.
    pub factor: f64,
    pub achieved_db: f64,
    pub target_db: f64,
}

impl<T: Real> CalibrationProbe<'_, T> {
    /// Mean PSNR of the probe images under `params`. Masks and noise draws
    /// are keyed by image index, so repeated calls reuse the same random
    /// numbers.
    pub fn mean_psnr(&self, params: NoiseParams) -> Result<f64> {
        if self.images.is_empty() {
            return Err(Error::Calibration("empty probe set".into()));
        }
        let mut total = 0.0;
        for (i, img) in self.images.iter().enumerate() {
            let mut rng = substream(self.seed.wrapping_add(i as u64), stream::PROBE);
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let model = ArtifactModel::sample(h, w, &self.kinds, params, MaskMode::Random, &mut rng)?;
            let noisy = corrupt(img, &model, &mut rng)?;
            let db = psnr(img, &noisy, 1.0)?;
            if !db.is_finite() {
                return Err(Error::Calibration(format!("probe image {i} is unchanged by the noise")));
            }
            total += db;
        }
        Ok(total / self.images.len() as f64)
    }
}

/// Bisection tolerance on the measured mean PSNR.
const CALIBRATION_TOL_DB: f64 = 0.05;
const ACCEPT_TOL_DB: f64 = 0.5;

/// Scales `base` by a single severity factor until the probe set's mean
/// PSNR matches `target_db`.
pub fn calibrate_to_psnr<T: Real>(target_db: f64, base: NoiseParams, probe: &CalibrationProbe<'_, T>) -> Result<Calibration> {
    if !(5.0..=50.0).contains(&target_db) {
        return Err(Error::Calibration(format!("target {target_db} dB outside [5, 50]")));
    }
    base.validate()?;
    let measure = |factor: f64| probe.mean_psnr(base.scaled(factor));

    let at_one = measure(1.0)?;
    if (at_one - target_db).abs() <= CALIBRATION_TOL_DB {
        return Ok(Calibration { params: base, factor: 1.0, achieved_db: at_one, target_db });
    }

    // Log-space bisection; PSNR falls as the factor grows.
    let (mut lo, mut hi) = (1e-3f64.ln(), 1e3f64.ln());
    let (db_lo, db_hi) = (measure(lo.exp())?, measure(hi.exp())?);
    if db_lo < target_db || db_hi > target_db {
        return Err(Error::Calibration(format!(
            "target {target_db} dB unreachable: severity range spans {db_hi:.2}..{db_lo:.2} dB"
        )));
    }
    let mut best = (1.0, at_one);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let db = measure(mid.exp())?;
        if (db - target_db).abs() < (best.1 - target_db).abs() {
            best = (mid.exp(), db);
        }
        if (db - target_db).abs() <= CALIBRATION_TOL_DB {
            break;
        }
        if db > target_db {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (factor, achieved_db) = best;
    if (achieved_db - target_db).abs() > ACCEPT_TOL_DB {
        return Err(Error::Calibration(format!(
            "bisection ended at {achieved_db:.2} dB, more than {ACCEPT_TOL_DB} dB from {target_db}"
        )));
    }
    Ok(Calibration { params: base.scaled(factor), factor, achieved_db, target_db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    #[test]
    fn full_frame_mask_is_all_ones() {
        let masks = sample_masks(7, 5, 1, MaskMode::FullFrame, &mut rng(0));
        let m: Tensor<f32> = masks[0].to_mask(7, 5);
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn masks_are_deterministic_per_seed() {
        let a = sample_masks(64, 48, 3, MaskMode::Random, &mut rng(9));
        let b = sample_masks(64, 48, 3, MaskMode::Random, &mut rng(9));
        assert_eq!(a, b);
    }

    #[test]
    fn rectangle_area_stays_in_band() {
        let mut r = rng(3);
        let (h, w) = (256, 256);
        let mut sum = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let m = sample_rect(h, w, &mut r);
            let f = m.area() as f64 / (h * w) as f64;
            assert!((MIN_MASK_FRACTION..=MAX_MASK_FRACTION).contains(&f), "fraction {f}");
            assert!(m.y0 + m.height <= h && m.x0 + m.width <= w);
            sum += f;
        }
        let mean = sum / n as f64;
        assert!((0.3..=0.45).contains(&mean), "mean fraction {mean}");
    }

    #[test]
    fn zero_noise_is_identity() {
        let img = face_like_scene::<f32, _>(32, 32, &mut rng(1));
        let model = ArtifactModel::sample(32, 32, &NoiseKind::ALL, NoiseParams::zero(), MaskMode::FullFrame, &mut rng(2)).unwrap();
        let out = corrupt(&img, &model, &mut rng(3)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn full_density_salt_pepper_is_binary() {
        let img = face_like_scene::<f32, _>(24, 24, &mut rng(1));
        let params = NoiseParams { salt_pepper_density: 1.0, ..NoiseParams::zero() };
        let model = ArtifactModel::sample(24, 24, &[NoiseKind::SaltPepper], params, MaskMode::FullFrame, &mut rng(2)).unwrap();
        let out = corrupt(&img, &model, &mut rng(3)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn pixels_outside_masks_are_bitwise_unchanged() {
        let img = face_like_scene::<f32, _>(48, 40, &mut rng(5));
        let model = ArtifactModel::sample(48, 40, &NoiseKind::ALL, NoiseParams::default(), MaskMode::Random, &mut rng(6)).unwrap();
        let out = corrupt(&img, &model, &mut rng(7)).unwrap();
        for y in 0..48 {
            for x in 0..40 {
                if model.components.iter().all(|c| !c.mask.contains(y, x)) {
                    for ch in 0..3 {
                        assert_eq!(out.get(&[y, x, ch]).to_bits(), img.get(&[y, x, ch]).to_bits());
                    }
                }
            }
        }
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let again = corrupt(&img, &model, &mut rng(7)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn gaussian_sigma_tenth_gives_twenty_db() {
        let gray = Tensor::<f64>::full(&[64, 64, 3], 0.5);
        let params = NoiseParams { gaussian_sigma: 0.1, ..NoiseParams::zero() };
        let model = ArtifactModel::sample(64, 64, &[NoiseKind::Gaussian], params, MaskMode::FullFrame, &mut rng(0)).unwrap();
        let mut r = rng(11);
        let trials = 50;
        let mean: f64 = (0..trials)
            .map(|_| psnr(&gray, &corrupt(&gray, &model, &mut r).unwrap(), 1.0).unwrap())
            .sum::<f64>()
            / trials as f64;
        assert!((mean - 20.0).abs() < 0.3, "mean PSNR {mean}");
    }

    fn probe_images(n: usize, size: usize, seed: u64) -> Vec<Tensor<f32>> {
        let mut r = rng(seed);
        (0..n).map(|_| face_like_scene(size, size, &mut r)).collect()
    }

    #[test]
    fn doubling_sigma_lowers_psnr() {
        let imgs = probe_images(6, 32, 4);
        let probe = CalibrationProbe { images: &imgs, kinds: vec![NoiseKind::Gaussian], seed: 8 };
        let base = NoiseParams { gaussian_sigma: 0.05, ..NoiseParams::zero() };
        let mut prev = f64::INFINITY;
        for k in 0..4 {
            let p = NoiseParams { gaussian_sigma: base.gaussian_sigma * 2f64.powi(k), ..base };
            let db = probe.mean_psnr(p).unwrap();
            assert!(db < prev, "sigma {} gave {db} dB after {prev}", p.gaussian_sigma);
            prev = db;
        }
    }

    #[test]
    fn calibrating_to_own_psnr_is_a_fixed_point() {
        let imgs = probe_images(8, 32, 5);
        let probe = CalibrationProbe { images: &imgs, kinds: NoiseKind::ALL.to_vec(), seed: 2 };
        let base = NoiseParams::default();
        let own = probe.mean_psnr(base).unwrap();
        let cal = calibrate_to_psnr(own, base, &probe).unwrap();
        assert_eq!(cal.params, base);
        assert_eq!(cal.factor, 1.0);
    }

    #[test]
    fn calibration_reaches_target_and_rejects_bad_targets() {
        let imgs = probe_images(8, 32, 6);
        let probe = CalibrationProbe { images: &imgs, kinds: NoiseKind::ALL.to_vec(), seed: 3 };
        let cal = calibrate_to_psnr(16.64, NoiseParams::default(), &probe).unwrap();
        assert!((cal.achieved_db - 16.64).abs() <= 0.05);
        assert!(matches!(calibrate_to_psnr(60.0, NoiseParams::default(), &probe), Err(Error::Calibration(_))));
        // Salt-and-pepper density saturates at 1, so very low PSNR is out of reach.
        let sp = CalibrationProbe { images: &imgs, kinds: vec![NoiseKind::SaltPepper], seed: 3 };
        assert!(matches!(calibrate_to_psnr(5.0, NoiseParams::default(), &sp), Err(Error::Calibration(_))));
    }
}
