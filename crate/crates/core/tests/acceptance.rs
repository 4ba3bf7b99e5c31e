//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). The slow beta comparison
//! runs only with `PSVAE_SLOW=1` or `--include-ignored`.

mod support;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use psvae_core::losses::{decoder_loss, gaussian_kl};
use psvae_core::metrics::{ms_ssim, psnr, ssim, uqi, MetricConfig, MS_SSIM_WEIGHTS};
use psvae_core::model::{ArchDescriptor, ModelParams, ParamSet};
use psvae_core::patching::{assemble, split};
use psvae_core::rng::{stream, substream, StreamRng};
use psvae_core::synth::{calibrate_to_psnr, corrupt, face_like_scene, CalibrationProbe, MaskMode};
use psvae_core::trainer::{evaluate, train_stage1, train_stage2, PatchDataset};
use psvae_core::{ArtifactModel, Graph, NoiseKind, NoiseParams, PatchGridSpec, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use support::grad;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    slow: bool,
    run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn panic_text(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

// 1

fn gradients() -> Outcome {
    for (name, check) in grad::SUITE {
        panic::catch_unwind(check).map_err(|e| format!("{name}: {}", panic_text(e)))?;
    }
    Ok(format!("{} layer and loss groups, 64-bit < 1e-5, 32-bit < 1e-3", grad::SUITE.len()))
}

// 2

fn log_normal(z: f64, mu: f64, sigma: f64) -> f64 {
    -0.5 * ((z - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn kl_monte_carlo() -> Outcome {
    const SAMPLES: usize = 40_000;
    let mut rng = StreamRng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..25 {
        let dz = rng.random_range(1..=8);
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..dz).map(|_| rng.random_range(lo..hi)).collect() };
        let (mu_q, sd_q, mu_p, sd_p) = (draw(-2.0, 2.0), draw(0.3, 2.0), draw(-2.0, 2.0), draw(0.3, 2.0));
        let closed = gaussian_kl(&mu_q, &sd_q, &mu_p, &sd_p, false).map_err(|e| e.to_string())?;

        let std = Normal::new(0.0, 1.0).unwrap();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..SAMPLES {
            let mut lr = 0.0;
            for i in 0..dz {
                let z = mu_q[i] + sd_q[i] * std.sample(&mut rng);
                lr += log_normal(z, mu_q[i], sd_q[i]) - log_normal(z, mu_p[i], sd_p[i]);
            }
            sum += lr;
            sum_sq += lr * lr;
        }
        let n = SAMPLES as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean) / (n - 1.0)).sqrt();
        let z = (closed - mean).abs() / se;
        worst = worst.max(z);
        ensure(z <= 3.0, || format!("case {case}: closed {closed:.5} vs estimate {mean:.5} ({z:.2} SE)"))?;
    }
    Ok(format!("25 cases, worst deviation {worst:.2} SE"))
}

// 3

fn patch_round_trip() -> Outcome {
    let mut rng = StreamRng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let d = rng.random_range(2..=24);
        let overlap = rng.random_range(0..d);
        let stride = d - overlap;
        let (rows, cols) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let (h, w) = (d + (rows - 1) * stride, d + (cols - 1) * stride);
        let c = rng.random_range(1..=3);
        let image = Tensor::<f64>::uniform(&[h, w, c], 1.0, &mut rng);
        let spec = PatchGridSpec::new(d, overlap, h, w, c).map_err(|e| format!("case {case}: {e}"))?;
        let back = assemble(&split(&image, &spec).map_err(|e| e.to_string())?, &spec).map_err(|e| e.to_string())?;
        let err = back.max_abs_diff(&image);
        worst = worst.max(err);
        ensure(err <= 1e-6, || format!("case {case}: D={d} overlap={overlap} {h}x{w}x{c}: error {err:.2e}"))?;
    }
    let spec = PatchGridSpec::new(16, 4, 256, 256, 3).map_err(|e| e.to_string())?;
    let n = split(&Tensor::<f64>::zeros(&[256, 256, 3]), &spec).map_err(|e| e.to_string())?.len();
    ensure(n == 441, || format!("256x256 at D=16, overlap 4 gave {n} patches"))?;
    Ok(format!("50 grids, worst error {worst:.1e}; 256x256 gives {n} patches"))
}

// 4

fn add_clamped(x: &Tensor<f64>, e: &Tensor<f64>, scale: f64) -> Tensor<f64> {
    let v = x.data().iter().zip(e.data()).map(|(a, b)| (a + scale * b).clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape(), v).unwrap()
}

fn tiny_arch() -> ArchDescriptor {
    ArchDescriptor { enc: [4, 4, 4, 8, 8], hidden: 16, dec: [8, 8, 4, 4, 4], ..ArchDescriptor::srgb(8) }
}

fn stage2_isolation() -> Outcome {
    let arch = tiny_arch();
    let mut rng = substream(4, stream::SYNTH);
    let pairs: Vec<(Tensor<f64>, Tensor<f64>)> = (0..4)
        .map(|_| {
            let clean = face_like_scene(20, 20, &mut rng);
            let jitter = Tensor::<f64>::randn(clean.shape(), &mut rng);
            let noisy = add_clamped(&clean, &jitter, 0.1);
            (noisy, clean)
        })
        .collect();
    let data = PatchDataset::from_pairs(&pairs, 8, 2).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        arch: arch.clone(),
        batch_size: 16,
        epochs_stage1: 2,
        epochs_stage2: 2,
        components: 3,
        decoders: 3,
        latent_dim: 4,
        seed: 4,
        ..TrainConfig::default()
    };
    let (frozen, _) = train_stage1(&data, &cfg).map_err(|e| e.to_string())?;
    let before = frozen.clone();
    let (trained, _) = train_stage2(&data, &frozen, &cfg).map_err(|e| e.to_string())?;
    ensure(frozen == before, || "stage 2 modified the frozen model".into())?;
    ensure(trained.encoder == before.encoder && trained.prior == before.prior, || "encoder or prior changed in stage 2".into())?;

    // Crafted batches: everything to one decoder, encoder bound alongside.
    let m = ModelParams::<f64>::build(&arch, 3, 4, 3, &mut StreamRng::seed_from_u64(40)).map_err(|e| e.to_string())?;
    for target_decoder in 0..3 {
        let mut g = Graph::new();
        let enc_vars = m.encoder.bind(&mut g, true);
        let dec_vars: Vec<_> = m.decoders.iter().map(|d| d.bind(&mut g, true)).collect();
        let z = Tensor::randn(&[6, 4], &mut rng);
        let target = Tensor::uniform(&[6, 8, 8, 3], 0.5, &mut rng).map(|v: f64| v + 0.5);
        let routes = vec![target_decoder; 6];
        let loss = decoder_loss(&mut g, &arch, &dec_vars, &z, &routes, &target, 1e-5).map_err(|e| e.to_string())?;
        let grads = g.backward(loss.total).map_err(|e| e.to_string())?;
        let zero = |vars: &[psvae_core::Var]| vars.iter().all(|&v| grads.get(v).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
        ensure(zero(&enc_vars), || "encoder received a decoder-loss gradient".into())?;
        for (j, vars) in dec_vars.iter().enumerate() {
            let nonzero = !zero(vars);
            ensure(nonzero == (j == target_decoder), || {
                format!("routes all to decoder {target_decoder}: decoder {j} gradient nonzero = {nonzero}")
            })?;
        }
    }
    Ok("frozen model bitwise unchanged; unrouted decoders and encoder get exact zeros".into())
}

// 5

/// Two-dimensional Gaussian weights, normalised over the whole window.
fn window_2d(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w.push((-r2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

struct Chan {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Chan {
    fn of(img: &Tensor<f64>, ch: usize) -> Chan {
        let s = img.shape();
        Chan { h: s[0], w: s[1], v: (0..s[0] * s[1]).map(|i| img.data()[i * s[2] + ch]).collect() }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.v[y * self.w + x]
    }

    fn half(&self) -> Chan {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                v.push((self.at(2 * y, 2 * x) + self.at(2 * y + 1, 2 * x) + self.at(2 * y, 2 * x + 1) + self.at(2 * y + 1, 2 * x + 1)) / 4.0);
            }
        }
        Chan { h, w, v }
    }
}

/// Per-window weighted statistics with explicit two-pass moments.
/// Returns mean SSIM and mean contrast-structure term.
fn direct_ssim(a: &Chan, b: &Chan, size: usize) -> (f64, f64) {
    let wts = window_2d(size, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut s_sum, mut cs_sum, mut count) = (0.0, 0.0, 0.0);
    for y in 0..=a.h - size {
        for x in 0..=a.w - size {
            let cells = || (0..size).flat_map(move |i| (0..size).map(move |j| (i, j)));
            let (mut ma, mut mb) = (0.0, 0.0);
            for (i, j) in cells() {
                let wt = wts[i * size + j];
                ma += wt * a.at(y + i, x + j);
                mb += wt * b.at(y + i, x + j);
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for (i, j) in cells() {
                let wt = wts[i * size + j];
                let (da, db) = (a.at(y + i, x + j) - ma, b.at(y + i, x + j) - mb);
                va += wt * da * da;
                vb += wt * db * db;
                cov += wt * da * db;
            }
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            s_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * cs;
            cs_sum += cs;
            count += 1.0;
        }
    }
    (s_sum / count, cs_sum / count)
}

fn direct_uqi(a: &Chan, b: &Chan) -> f64 {
    const N: usize = 8;
    let n = (N * N) as f64;
    let (mut total, mut count) = (0.0, 0.0);
    for y in 0..=a.h - N {
        for x in 0..=a.w - N {
            let pts: Vec<(f64, f64)> =
                (0..N).flat_map(|i| (0..N).map(move |j| (i, j))).map(|(i, j)| (a.at(y + i, x + j), b.at(y + i, x + j))).collect();
            let ma = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let mb = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let va = pts.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / (n - 1.0);
            let vb = pts.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / (n - 1.0);
            let cov = pts.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / (n - 1.0);
            total += 4.0 * cov * ma * mb / ((va + vb) * (ma * ma + mb * mb));
            count += 1.0;
        }
    }
    total / count
}

fn direct_ms_ssim(a: &Chan, b: &Chan) -> f64 {
    let (mut a, mut b) = (Chan { v: a.v.clone(), ..*a }, Chan { v: b.v.clone(), ..*b });
    let mut value = 1.0;
    for (level, wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (s, cs) = direct_ssim(&a, &b, 11.min(a.h).min(a.w));
        let term = if level + 1 == MS_SSIM_WEIGHTS.len() { s } else { cs };
        value *= term.max(0.0).powf(*wt);
        a = a.half();
        b = b.half();
    }
    value
}

fn per_channel(x: &Tensor<f64>, y: &Tensor<f64>, f: impl Fn(&Chan, &Chan) -> f64) -> f64 {
    let c = x.shape()[2];
    (0..c).map(|ch| f(&Chan::of(x, ch), &Chan::of(y, ch))).sum::<f64>() / c as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = StreamRng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let (h, w) = (rng.random_range(64..=90), rng.random_range(64..=90));
        let x: Tensor<f64> = if case % 2 == 0 {
            face_like_scene(h, w, &mut rng)
        } else {
            Tensor::uniform(&[h, w, 3], 0.5, &mut rng).map(|v: f64| v + 0.5)
        };
        let sigma = rng.random_range(0.02..0.3);
        let e = Tensor::<f64>::randn(x.shape(), &mut rng);
        let y = add_clamped(&x, &e, sigma);
        let pairs = [
            ("ssim", ssim(&x, &y, 1.0), per_channel(&x, &y, |a, b| direct_ssim(a, b, 11).0)),
            ("uqi", uqi(&x, &y), per_channel(&x, &y, direct_uqi)),
            ("ms_ssim", ms_ssim(&x, &y, 1.0), per_channel(&x, &y, direct_ms_ssim)),
        ];
        for (name, fast, direct) in pairs {
            let fast = fast.map_err(|e| format!("case {case} {name}: {e}"))?;
            let err = (fast - direct).abs();
            worst = worst.max(err);
            ensure(err <= 1e-5, || format!("case {case} {name}: {fast:.8} vs direct {direct:.8}"))?;
        }
        for (name, v) in [("ssim", ssim(&x, &x, 1.0)), ("uqi", uqi(&x, &x)), ("ms_ssim", ms_ssim(&x, &x, 1.0))] {
            let v = v.map_err(|e| e.to_string())?;
            ensure((v - 1.0).abs() <= 1e-6, || format!("case {case}: {name}(x, x) = {v}"))?;
        }
    }
    Ok(format!("20 pairs, worst disagreement {worst:.1e}; self-similarity 1"))
}

// 6

fn adjoint() -> Outcome {
    panic::catch_unwind(grad::conv_adjoint_identity).map_err(panic_text)?;
    Ok("20 shape draws within 1e-6".into())
}

// 7

fn calibration() -> Outcome {
    const TARGET: f64 = 16.64;
    let mut rng = substream(7, stream::SYNTH);
    let images: Vec<Tensor<f64>> = (0..100).map(|_| face_like_scene(128, 128, &mut rng)).collect();
    let probe = CalibrationProbe { images: &images[..20], kinds: NoiseKind::ALL.to_vec(), seed: 7 };
    let cal = calibrate_to_psnr(TARGET, NoiseParams::default(), &probe).map_err(|e| e.to_string())?;
    let mut total = 0.0;
    for (i, img) in images.iter().enumerate() {
        let seed = 1000 + i as u64;
        let model = ArtifactModel::sample(128, 128, &NoiseKind::ALL, cal.params, MaskMode::Random, &mut substream(seed, stream::SYNTH))
            .map_err(|e| e.to_string())?;
        let noisy = corrupt(img, &model, &mut substream(seed, stream::NOISE)).map_err(|e| e.to_string())?;
        total += psnr(img, &noisy, 1.0).map_err(|e| e.to_string())?;
    }
    let mean = total / images.len() as f64;
    ensure((mean - TARGET).abs() <= 0.5, || format!("mean PSNR {mean:.3} dB over 100 images (factor {:.3})", cal.factor))?;
    Ok(format!("mean {mean:.3} dB over 100 images, 20 probes, factor {:.3}", cal.factor))
}

// 8, 9, 10

type Pairs = Vec<(Tensor<f32>, Tensor<f32>)>;

/// 200 training and 50 test pairs of 64x64 scenes with all three artifact
/// kinds, calibrated to the standard noise level.
fn toy_set(seed: u64) -> Result<(PatchDataset<f32>, Pairs), String> {
    let mut rng = substream(seed, stream::SYNTH);
    let clean: Vec<Tensor<f32>> = (0..250).map(|_| face_like_scene(64, 64, &mut rng)).collect();
    let probe_images: Vec<Tensor<f32>> = (0..20).map(|_| face_like_scene(64, 64, &mut rng)).collect();
    let probe = CalibrationProbe { images: &probe_images, kinds: NoiseKind::ALL.to_vec(), seed };
    let cal = calibrate_to_psnr(16.64, NoiseParams::default(), &probe).map_err(|e| e.to_string())?;
    let pairs = clean
        .into_iter()
        .map(|c| {
            let m = ArtifactModel::sample(64, 64, &NoiseKind::ALL, cal.params, MaskMode::Random, &mut rng)?;
            Ok((corrupt(&c, &m, &mut rng)?, c))
        })
        .collect::<psvae_core::Result<Pairs>>()
        .map_err(|e| e.to_string())?;
    let (train, test) = pairs.split_at(200);
    let data = PatchDataset::from_pairs(train, 16, 4).map_err(|e| e.to_string())?;
    Ok((data, test.to_vec()))
}

fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        arch: ArchDescriptor::srgb(16),
        epochs_stage1: 10,
        epochs_stage2: 10,
        latent_dim: 32,
        components: 4,
        decoders: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn mean_psnr(m: &ModelParams<f32>, test: &[(Tensor<f32>, Tensor<f32>)]) -> Result<f64, String> {
    let report = evaluate(m, test, 4, &MetricConfig::default()).map_err(|e| e.to_string())?;
    Ok(report.mean.map(|r| r.psnr).unwrap_or(f64::NAN))
}

/// Cluster shares of the training patches under the frozen encoder.
fn route_shares(m: &ModelParams<f32>, data: &PatchDataset<f32>) -> Result<Vec<f64>, String> {
    let mut counts = vec![0usize; m.components()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(500) {
        for code in m.encode_deterministic(&data.noisy.select_rows(chunk)).map_err(|e| e.to_string())? {
            counts[code.route] += 1;
        }
    }
    Ok(counts.iter().map(|&c| c as f64 / data.len() as f64).collect())
}

struct SeedRun {
    seed: u64,
    multi: f64,
    single: f64,
    shares: Vec<f64>,
}

fn decoder_runs() -> Result<Vec<SeedRun>, String> {
    (0..3u64)
        .map(|seed| {
            let (data, test) = toy_set(seed)?;
            let cfg = toy_config(seed);
            let (frozen, _) = train_stage1(&data, &cfg).map_err(|e| e.to_string())?;
            let shares = route_shares(&frozen, &data)?;
            let mut scores = [0.0; 2];
            for (slot, k) in [4usize, 1].into_iter().enumerate() {
                let (m, _) = train_stage2(&data, &frozen, &TrainConfig { decoders: k, ..cfg.clone() }).map_err(|e| e.to_string())?;
                scores[slot] = mean_psnr(&m, &test)?;
            }
            let run = SeedRun { seed, multi: scores[0], single: scores[1], shares };
            eprintln!(
                "  seed {}: k=4 {:.3} dB, k=1 {:.3} dB, gap {:+.3} dB, stage-1 shares {:?}",
                run.seed,
                run.multi,
                run.single,
                run.multi - run.single,
                run.shares.iter().map(|s| (s * 1000.0).round() / 1000.0).collect::<Vec<_>>()
            );
            Ok(run)
        })
        .collect()
}

thread_local! {
    static RUNS: std::cell::RefCell<Option<Result<Vec<SeedRun>, String>>> = const { std::cell::RefCell::new(None) };
}

/// Criteria 8 and 10 share one set of training runs.
fn with_runs<R>(f: impl FnOnce(&[SeedRun]) -> Result<R, String>) -> Result<R, String> {
    RUNS.with(|cell| {
        let mut slot = cell.borrow_mut();
        if slot.is_none() {
            *slot = Some(panic::catch_unwind(decoder_runs).unwrap_or_else(|e| Err(panic_text(e))));
        }
        match slot.as_ref().unwrap() {
            Ok(runs) => f(runs),
            Err(e) => Err(e.clone()),
        }
    })
}

fn multi_decoder_gap() -> Outcome {
    with_runs(|runs| {
        let gaps: Vec<f64> = runs.iter().map(|r| r.multi - r.single).collect();
        let wins = gaps.iter().filter(|&&g| g >= 0.3).count();
        let text = gaps.iter().map(|g| format!("{g:+.3}")).collect::<Vec<_>>().join(", ");
        ensure(wins >= 2, || format!("gaps {text} dB; {wins} of 3 seeds reach +0.3 dB"))?;
        Ok(format!("gaps {text} dB; {wins} of 3 seeds reach +0.3 dB"))
    })
}

fn beta_trend() -> Outcome {
    let mut wins = 0;
    let mut text = Vec::new();
    for seed in 0..3u64 {
        let (data, test) = toy_set(seed)?;
        let mut scores = [0.0; 2];
        for (slot, beta) in [0.1, 1.0].into_iter().enumerate() {
            let mut cfg = toy_config(seed);
            cfg.loss.beta = beta;
            let (frozen, _) = train_stage1(&data, &cfg).map_err(|e| e.to_string())?;
            let (m, _) = train_stage2(&data, &frozen, &cfg).map_err(|e| e.to_string())?;
            scores[slot] = mean_psnr(&m, &test)?;
        }
        eprintln!("  seed {seed}: beta 0.1 {:.3} dB, beta 1.0 {:.3} dB", scores[0], scores[1]);
        if scores[0] >= scores[1] - 0.1 {
            wins += 1;
        }
        text.push(format!("{:+.3}", scores[0] - scores[1]));
    }
    let text = text.join(", ");
    ensure(wins >= 2, || format!("differences {text} dB; {wins} of 3 seeds within tolerance"))?;
    Ok(format!("beta 0.1 minus beta 1.0: {text} dB; {wins} of 3 seeds hold"))
}

fn routing_spread() -> Outcome {
    with_runs(|runs| {
        let top = runs.iter().map(|r| r.shares.iter().cloned().fold(0.0, f64::max)).fold(0.0, f64::max);
        ensure(top <= 0.9, || format!("a cluster holds {:.1}% of patches after stage 1", 100.0 * top))?;
        Ok(format!("largest cluster share {:.1}% across 3 seeds", 100.0 * top))
    })
}

const MIN: u64 = 60;

fn criteria() -> Vec<Criterion> {
    let c = |id, name, secs: u64, slow, run| Criterion { id, name, budget: Duration::from_secs(secs), slow, run };
    vec![
        c(1, "gradient suite", 2 * MIN, false, gradients),
        c(2, "gaussian KL against Monte Carlo", MIN, false, kl_monte_carlo),
        c(3, "patch split/assemble round trip", MIN, false, patch_round_trip),
        c(4, "stage-2 isolation", MIN, false, stage2_isolation),
        c(5, "metric oracles", MIN, false, metric_oracles),
        c(6, "conv/transpose adjoint", MIN, false, adjoint),
        c(7, "noise calibration to 16.64 dB", 2 * MIN, false, calibration),
        c(8, "multi-decoder advantage", 30 * MIN, false, multi_decoder_gap),
        c(9, "beta trend", 60 * MIN, true, beta_trend),
        c(10, "routing non-degeneracy", 30 * MIN, false, routing_spread),
    ]
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        for c in criteria() {
            println!("criterion_{}: test", c.id);
        }
        return;
    }
    let slow = std::env::var("PSVAE_SLOW").is_ok_and(|v| v == "1") || args.iter().any(|a| a == "--include-ignored" || a == "--ignored");
    let filter = args.iter().skip(1).find(|a| !a.starts_with('-')).cloned();
    panic::set_hook(Box::new(|_| {}));

    let mut failed = 0;
    for c in criteria() {
        if filter.as_ref().is_some_and(|f| !format!("criterion_{} {}", c.id, c.name).contains(f.as_str())) {
            continue;
        }
        if c.slow && !slow {
            println!("criterion {:>2} {:<36} SKIP  slow suite; set PSVAE_SLOW=1", c.id, c.name);
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| Err(panic_text(e)));
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if took > c.budget => Err(format!("{msg}; over the {} s budget", c.budget.as_secs())),
            o => o,
        };
        let (tag, msg) = match &outcome {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        println!("criterion {:>2} {:<36} {tag}  {msg} [{:.1} s]", c.id, c.name, took.as_secs_f64());
        if outcome.is_err() {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
