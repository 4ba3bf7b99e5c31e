//! Two-stage training and patch-wise inference.
//!
//! Stage 1 fits the encoder, the mixture prior and a throwaway decoder on the
//! encoder objective. Stage 2 freezes all of that, routes every patch by its
//! soft label and fits one fresh decoder per route on its own sub-batch.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{decoder_loss, encoder_loss, EncoderStageVars, LossConfig};
use crate::metrics::{ImageMetrics, MetricConfig, MetricReport};
use crate::model::{route, take_grads, write_checkpoint, ArchDescriptor, DecoderParams, ModelParams, ParamSet};
use crate::patching::{assemble, split, PatchGridSpec, PatchRecord};
use crate::rng::{stream, substream};
use crate::tensor::{AdamConfig, AdamState, Graph, LrSchedule, Precision, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchDescriptor,
    /// Patches per optimisation step.
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Mixture components `S`.
    pub components: usize,
    /// Latent width `dz`.
    pub latent_dim: usize,
    /// Routed decoders `k`: either `S`, or 1 for the unrouted baseline.
    pub decoders: usize,
    pub precision: Precision,
    /// Standard deviation of the initial mixture means. Wide spreads leave
    /// one component nearest to every code at the start, and the others
    /// never recover.
    pub prior_init_std: f64,
    /// Start every routed decoder from a copy of the stage-1 decoder.
    pub reuse_dummy_decoder: bool,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchDescriptor::srgb(16),
            batch_size: 128,
            epochs_stage1: 50,
            epochs_stage2: 50,
            seed: 0,
            loss: LossConfig::default(),
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            components: 4,
            latent_dim: 64,
            decoders: 4,
            precision: Precision::F32,
            prior_init_std: 0.1,
            reuse_dummy_decoder: false,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return Err(Error::Config("both stages need at least one epoch".into()));
        }
        if !(self.prior_init_std >= 0.0 && self.prior_init_std.is_finite()) {
            return Err(Error::Config(format!("prior_init_std {} must be finite and >= 0", self.prior_init_std)));
        }
        if self.components == 0 || self.latent_dim == 0 {
            return Err(Error::Config("components and latent_dim must be >= 1".into()));
        }
        if self.decoders != self.components && self.decoders != 1 {
            return Err(Error::Config(format!(
                "decoders must equal components ({}) or be 1, got {}",
                self.components, self.decoders
            )));
        }
        self.loss.validate()?;
        self.schedule.validate()?;
        self.arch.validate()
    }
}

/// Paired noisy inputs and clean targets, both `[N, D, D, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset<T> {
    pub noisy: Tensor<T>,
    pub clean: Tensor<T>,
}

fn stack_patches<T: Real>(records: &[PatchRecord<T>]) -> Result<Tensor<T>> {
    let refs: Vec<&Tensor<T>> = records.iter().map(|r| &r.data).collect();
    Tensor::stack(&refs)
}

impl<T: Real> PatchDataset<T> {
    pub fn new(noisy: Tensor<T>, clean: Tensor<T>) -> Result<Self> {
        if noisy.shape() != clean.shape() || noisy.rank() != 4 {
            return Err(Error::dim(
                "dataset",
                format!("noisy {:?} and clean {:?} must be equal [N,D,D,C]", noisy.shape(), clean.shape()),
            ));
        }
        Ok(PatchDataset { noisy, clean })
    }

    /// Splits every `(noisy, clean)` image pair on `spec`'s grid.
    pub fn from_pairs(pairs: &[(Tensor<T>, Tensor<T>)], patch_size: usize, overlap: usize) -> Result<Self> {
        let mut noisy = Vec::new();
        let mut clean = Vec::new();
        for (n, c) in pairs {
            if n.shape() != c.shape() {
                return Err(Error::dim("dataset", format!("pair {:?} vs {:?}", n.shape(), c.shape())));
            }
            let spec = PatchGridSpec::for_image(patch_size, overlap, n)?;
            noisy.extend(split(n, &spec)?);
            clean.extend(split(c, &spec)?);
        }
        if noisy.is_empty() {
            return Err(Error::Contract("dataset has no patches".into()));
        }
        Self::new(stack_patches(&noisy)?, stack_patches(&clean)?)
    }

    pub fn len(&self) -> usize {
        self.noisy.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-patch averages of the objective terms over one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
    pub gaussian_kl: f64,
    pub categorical_kl: f64,
    pub reg: f64,
    /// Patches assigned to each cluster or decoder.
    pub route_counts: Vec<usize>,
    pub last_lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub epochs: Vec<EpochLog>,
    /// Learning rate used at each optimiser step.
    pub lr_per_step: Vec<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage1: StageLog,
    pub stage2: StageLog,
    pub warnings: Vec<String>,
    pub metrics: Option<MetricReport>,
}

impl TrainReport {
    /// `key = value` lines. Wall-clock times are left out so that reruns
    /// produce identical text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, stage) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            let _ = writeln!(s, "{name}.epochs = {}", stage.epochs.len());
            let _ = writeln!(s, "{name}.steps = {}", stage.lr_per_step.len());
            for e in &stage.epochs {
                let counts = e.route_counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
                let _ = writeln!(
                    s,
                    "{name}.epoch{} = loss {:.6} mse {:.6} gauss_kl {:.6} cat_kl {:.6} reg {:.6} lr {:.6e} routes [{counts}]",
                    e.epoch, e.loss, e.mse, e.gaussian_kl, e.categorical_kl, e.reg, e.last_lr
                );
            }
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning = {w}");
        }
        if let Some(m) = &self.metrics {
            for line in m.to_text().lines() {
                let _ = writeln!(s, "metrics.{line}");
            }
        }
        s
    }
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

fn maybe_checkpoint<T: Real>(cfg: &TrainConfig, params: &ModelParams<T>, stage: u8, epoch: usize) -> Result<()> {
    let Some(dir) = &cfg.checkpoint_dir else { return Ok(()) };
    if cfg.checkpoint_every == 0 || !epoch.is_multiple_of(cfg.checkpoint_every) {
        return Ok(());
    }
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("stage{stage}_epoch{epoch:03}.psvae"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(params, &mut f)
}

/// Trains encoder, prior and the stage-1 decoder on the encoder objective.
///
/// Inputs are the noisy patches; reconstruction targets are the clean ones.
pub fn train_stage1<T: Real>(data: &PatchDataset<T>, cfg: &TrainConfig) -> Result<(ModelParams<T>, TrainReport)> {
    cfg.validate()?;
    check_dataset(data, &cfg.arch)?;
    let start = Instant::now();
    let mut params =
        ModelParams::<T>::build(&cfg.arch, cfg.components, cfg.latent_dim, 0, &mut substream(cfg.seed, stream::INIT))?;
    let std = T::from_f64(cfg.prior_init_std);
    params.prior.mu = params.prior.mu.map(|v| v * std);
    let mut shuffle = substream(cfg.seed, stream::SHUFFLE);
    let mut eps_rng = substream(cfg.seed, stream::EPSILON);

    let mut adam = {
        let dummy = params.dummy.as_ref().expect("fresh model has a stage-1 decoder");
        AdamState::new(
            cfg.adam,
            params.encoder.tensors().into_iter().chain(params.prior.tensors()).chain(dummy.tensors()),
        )
    };
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs_stage1 {
        order.shuffle(&mut shuffle);
        let mut log = EpochLog { epoch, route_counts: vec![0; cfg.components], ..EpochLog::default() };
        for idx in batches(&order, cfg.batch_size) {
            let x = data.noisy.select_rows(idx);
            let t = data.clean.select_rows(idx);
            let eps = Tensor::randn(&[idx.len(), cfg.latent_dim], &mut eps_rng);

            let mut g = Graph::new();
            let enc = params.encoder.bind(&mut g, true);
            let pr = params.prior.bind(&mut g, true);
            let dummy = params.dummy.as_ref().expect("stage-1 decoder").bind(&mut g, true);
            let (xv, tv, ev) = (g.constant(x), g.constant(t), g.constant(eps));
            let vars = EncoderStageVars { encoder: &enc, prior_mu: pr[0], prior_log_sigma: pr[1], dummy: &dummy };
            let loss = encoder_loss(&mut g, &cfg.arch, &vars, &params.prior.weights, xv, tv, ev, &cfg.loss)
                .map_err(|e| abort(1, step, &e.to_string()))?;
            let val = |v: Var| g.value(v).item().to_f64_lossy();
            let terms = [val(loss.total), val(loss.mse), val(loss.gaussian_kl), val(loss.categorical_kl), val(loss.reg)];
            if terms.iter().any(|v| !v.is_finite()) {
                return Err(abort(
                    1,
                    step,
                    &format!(
                        "non-finite loss: total {} mse {} gauss_kl {} cat_kl {} reg {}",
                        terms[0], terms[1], terms[2], terms[3], terms[4]
                    ),
                ));
            }
            log.loss += terms[0];
            log.mse += terms[1];
            log.gaussian_kl += terms[2];
            log.categorical_kl += terms[3];
            log.reg += terms[4] * idx.len() as f64;
            let y = g.value(loss.enc.y_hat);
            for row in y.data().chunks(cfg.components) {
                log.route_counts[route(row)] += 1;
            }

            let all_vars: Vec<Var> = enc.iter().chain(&pr).chain(&dummy).copied().collect();
            let mut grads = g.backward(loss.total)?;
            let grads = take_grads(&mut grads, &all_vars);
            let lr = cfg.schedule.lr_at(step);
            let dummy = params.dummy.as_mut().expect("stage-1 decoder");
            let mut targets: Vec<&mut Tensor<T>> = params
                .encoder
                .tensors_mut()
                .into_iter()
                .chain(params.prior.tensors_mut())
                .chain(dummy.tensors_mut())
                .collect();
            adam.step(&mut targets, &grads, lr).map_err(|e| abort(1, step, &e.to_string()))?;
            report.stage1.lr_per_step.push(lr);
            log.last_lr = lr;
            step += 1;
        }
        let n = data.len() as f64;
        log.loss /= n;
        log.mse /= n;
        log.gaussian_kl /= n;
        log.categorical_kl /= n;
        log.reg /= n;
        report.stage1.epochs.push(log);
        maybe_checkpoint(cfg, &params, 1, epoch)?;
    }
    report.stage1.seconds = start.elapsed().as_secs_f64();
    Ok((params, report))
}

fn abort(stage: u8, step: u64, detail: &str) -> Error {
    Error::NumericAbort(format!("stage {stage}, step {step}: {detail}"))
}

fn check_dataset<T: Real>(data: &PatchDataset<T>, arch: &ArchDescriptor) -> Result<()> {
    let d = arch.patch_size;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if data.noisy.shape()[1..] != [d, d, arch.channels] {
        return Err(Error::Config(format!(
            "patches are {:?} but the architecture expects {d}x{d}x{}",
            &data.noisy.shape()[1..],
            arch.channels
        )));
    }
    Ok(())
}

/// Encoder outputs for every patch, computed once with the frozen encoder.
struct FrozenCodes<T> {
    mu: Tensor<T>,
    sigma: Tensor<T>,
    routes: Vec<usize>,
}

const EVAL_CHUNK: usize = 256;

fn frozen_codes<T: Real>(params: &ModelParams<T>, patches: &Tensor<T>, bypass: bool) -> Result<FrozenCodes<T>> {
    let n = patches.shape()[0];
    let dz = params.latent_dim();
    let mut mu = Vec::with_capacity(n * dz);
    let mut sigma = Vec::with_capacity(n * dz);
    let mut routes = Vec::with_capacity(n);
    let all: Vec<usize> = (0..n).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        for c in params.encode_deterministic(&patches.select_rows(idx))? {
            mu.extend_from_slice(c.mu_hat.data());
            sigma.extend_from_slice(c.sigma_hat.data());
            routes.push(if bypass { 0 } else { c.route });
        }
    }
    Ok(FrozenCodes { mu: Tensor::new(&[n, dz], mu)?, sigma: Tensor::new(&[n, dz], sigma)?, routes })
}

/// Fresh routed decoders for stage 2, each from its own random stream.
pub fn init_decoders<T: Real>(frozen: &ModelParams<T>, cfg: &TrainConfig) -> Vec<DecoderParams<T>> {
    (0..cfg.decoders)
        .map(|i| match (&frozen.dummy, cfg.reuse_dummy_decoder) {
            (Some(d), true) => d.clone(),
            _ => DecoderParams::init(&frozen.arch, frozen.latent_dim(), &mut substream(cfg.seed, stream::DECODER_BASE + i as u64)),
        })
        .collect()
}

/// Trains `cfg.decoders` routed decoders against a frozen encoder.
///
/// The encoder, prior and stage-1 decoder of `frozen` are never touched; the
/// returned model drops the stage-1 decoder. With one decoder, routing is
/// bypassed and every patch goes to it.
pub fn train_stage2<T: Real>(
    data: &PatchDataset<T>,
    frozen: &ModelParams<T>,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, TrainReport)> {
    cfg.validate()?;
    check_dataset(data, &frozen.arch)?;
    if frozen.arch != cfg.arch || frozen.components() != cfg.components || frozen.latent_dim() != cfg.latent_dim {
        return Err(Error::Config("stage-2 config does not match the frozen model".into()));
    }
    let start = Instant::now();
    let k = cfg.decoders;
    let bypass = k == 1;
    let codes = frozen_codes(frozen, &data.noisy, bypass)?;
    let mut decoders = init_decoders(frozen, cfg);
    let mut states: Vec<AdamState<T>> = decoders.iter().map(|d| AdamState::new(cfg.adam, d.tensors())).collect();
    let mut shuffle = substream(cfg.seed, stream::SHUFFLE_STAGE2);
    let mut eps_rng = substream(cfg.seed, stream::EPSILON_STAGE2);

    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs_stage2 {
        order.shuffle(&mut shuffle);
        let mut log = EpochLog { epoch, route_counts: vec![0; k], ..EpochLog::default() };
        for idx in batches(&order, cfg.batch_size) {
            let mu = codes.mu.select_rows(idx);
            let sigma = codes.sigma.select_rows(idx);
            let eps = Tensor::<T>::randn(mu.shape(), &mut eps_rng);
            let z_data = mu.data().iter().zip(sigma.data()).zip(eps.data()).map(|((&m, &s), &e)| m + e * s).collect();
            let z = Tensor::new(mu.shape(), z_data)?;
            let routes: Vec<usize> = idx.iter().map(|&i| codes.routes[i]).collect();
            let target = data.clean.select_rows(idx);

            let mut g = Graph::new();
            let vars: Vec<Vec<Var>> = decoders.iter().map(|d| d.bind(&mut g, true)).collect();
            let loss = decoder_loss(&mut g, &frozen.arch, &vars, &z, &routes, &target, cfg.loss.lambda_reg)
                .map_err(|e| abort(2, step, &e.to_string()))?;
            let (total, mse, reg) = (
                g.value(loss.total).item().to_f64_lossy(),
                g.value(loss.mse).item().to_f64_lossy(),
                g.value(loss.reg).item().to_f64_lossy(),
            );
            if !total.is_finite() || !mse.is_finite() || !reg.is_finite() {
                return Err(abort(2, step, &format!("non-finite loss: total {total} mse {mse} reg {reg}")));
            }
            log.loss += total;
            log.mse += mse;
            log.reg += reg * idx.len() as f64;
            for (c, &n) in log.route_counts.iter_mut().zip(&loss.counts) {
                *c += n;
            }

            let mut grads = g.backward(loss.total)?;
            let lr = cfg.schedule.lr_at(step);
            for (i, dec) in decoders.iter_mut().enumerate() {
                if loss.counts[i] == 0 {
                    continue;
                }
                let gi = take_grads(&mut grads, &vars[i]);
                states[i].step(&mut dec.tensors_mut(), &gi, lr).map_err(|e| abort(2, step, &e.to_string()))?;
            }
            report.stage2.lr_per_step.push(lr);
            log.last_lr = lr;
            step += 1;
        }
        for (i, &c) in log.route_counts.iter().enumerate() {
            if c == 0 {
                report.warnings.push(format!("stage 2 epoch {epoch}: decoder {} received no patches", i + 1));
            }
        }
        let n = data.len() as f64;
        log.loss /= n;
        log.mse /= n;
        log.reg /= n;
        report.stage2.epochs.push(log);
        if cfg.checkpoint_every > 0 && cfg.checkpoint_dir.is_some() {
            let snapshot = ModelParams { decoders: decoders.clone(), dummy: None, ..frozen.clone() };
            maybe_checkpoint(cfg, &snapshot, 2, epoch)?;
        }
    }
    report.stage2.seconds = start.elapsed().as_secs_f64();
    let trained = ModelParams {
        arch: frozen.arch.clone(),
        encoder: frozen.encoder.clone(),
        prior: frozen.prior.clone(),
        dummy: None,
        decoders,
    };
    Ok((trained, report))
}

/// Both stages back to back; the report carries both logs.
pub fn train<T: Real>(data: &PatchDataset<T>, cfg: &TrainConfig) -> Result<(ModelParams<T>, TrainReport)> {
    let (frozen, r1) = train_stage1(data, cfg)?;
    let (model, r2) = train_stage2(data, &frozen, cfg)?;
    Ok((model, TrainReport { stage1: r1.stage1, stage2: r2.stage2, warnings: r2.warnings, metrics: None }))
}

/// The decoders inference routes through, and whether routing applies.
fn inference_decoders<T: Real>(params: &ModelParams<T>) -> Result<(&[DecoderParams<T>], bool)> {
    match params.decoders.len() {
        0 => params
            .dummy
            .as_ref()
            .map(|d| (std::slice::from_ref(d), false))
            .ok_or_else(|| Error::Contract("model has no decoder".into())),
        1 => Ok((&params.decoders, false)),
        k if k == params.components() => Ok((&params.decoders, true)),
        k => Err(Error::Contract(format!("{k} decoders for {} mixture components", params.components()))),
    }
}

/// Restores a full image: split, encode with `z = mu_hat`, route, decode,
/// blend. Returns the image and the route of every patch in grid order.
pub fn infer<T: Real>(image: &Tensor<T>, params: &ModelParams<T>, spec: &PatchGridSpec) -> Result<(Tensor<T>, Vec<usize>)> {
    if spec.patch_size != params.arch.patch_size || spec.channels != params.arch.channels {
        return Err(Error::Config(format!(
            "grid uses {}x{}x{} patches, model expects {}x{}x{}",
            spec.patch_size, spec.patch_size, spec.channels, params.arch.patch_size, params.arch.patch_size, params.arch.channels
        )));
    }
    let (decoders, routed) = inference_decoders(params)?;
    let mut records = split(image, spec)?;
    let patches = stack_patches(&records)?;
    let codes = frozen_codes(params, &patches, !routed)?;
    let n = records.len();
    for (i, dec) in decoders.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&j| codes.routes[j] == i).collect();
        for chunk in rows.chunks(EVAL_CHUNK) {
            let out = params.decode(&codes.mu.select_rows(chunk), dec)?;
            for (&j, patch) in chunk.iter().zip(out.unstack()) {
                records[j].data = patch;
            }
        }
    }
    Ok((assemble(&records, spec)?, codes.routes))
}

/// Restores every noisy image and scores it against its clean reference.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    pairs: &[(Tensor<T>, Tensor<T>)],
    overlap: usize,
    metric_cfg: &MetricConfig,
) -> Result<MetricReport> {
    let rows = pairs
        .iter()
        .enumerate()
        .map(|(i, (noisy, clean))| {
            let spec = PatchGridSpec::for_image(params.arch.patch_size, overlap, noisy)?;
            let (restored, _) = infer(noisy, params, &spec)?;
            ImageMetrics::compute(format!("{i}"), clean, &restored, metric_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new(metric_cfg.clone(), rows))
}
