//! Encoder, Gaussian-mixture prior and routed decoders.
//!
//! Parameters live in plain structs. A forward pass binds them onto a
//! [`Graph`] as leaves in the order of `tensors()`, so gradients can be
//! read back in that same order.

mod arch;
mod checkpoint;

pub use arch::{ArchDescriptor, InputKind};
pub use checkpoint::{read_checkpoint, read_header, write_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Padding, Real, Tensor, Var};

/// Weight and bias of one dense, conv or transposed-conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl<T: Real> Layer<T> {
    fn new<R: Rng + ?Sized>(shape: &[usize], bias_len: usize, bound: f64, rng: &mut R) -> Self {
        Layer { weight: Tensor::uniform(shape, bound, rng), bias: Tensor::zeros(&[bias_len]) }
    }

    fn dense<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, relu: bool, rng: &mut R) -> Self {
        let bound = if relu { he_bound(fan_in) } else { xavier_bound(fan_in, fan_out) };
        Self::new(&[fan_in, fan_out], fan_out, bound, rng)
    }

    /// Conv kernel `[3, 3, c_in, c_out]`.
    fn conv<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self::new(&[3, 3, c_in, c_out], c_out, he_bound(9 * c_in), rng)
    }

    /// Transposed-conv kernel `[3, 3, c_out, c_in]`.
    fn tconv<R: Rng + ?Sized>(c_in: usize, c_out: usize, relu: bool, rng: &mut R) -> Self {
        let bound = if relu { he_bound(9 * c_in) } else { xavier_bound(9 * c_in, 9 * c_out) };
        Self::new(&[3, 3, c_out, c_in], c_out, bound, rng)
    }
}

/// A named, ordered collection of parameter tensors.
pub trait ParamSet<T: Real> {
    fn tensors(&self) -> Vec<&Tensor<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;
    fn names(&self, prefix: &str) -> Vec<String>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sq_norm().to_f64_lossy()).sum()
    }

    /// Adds every tensor to `g` as a trainable leaf or a constant.
    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }
}

/// Pulls gradients for `vars` out of `grads`, in order.
pub fn take_grads<T: Real>(grads: &mut Gradients<T>, vars: &[Var]) -> Vec<Tensor<T>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

fn layer_tensors<'a, T>(layers: &[&'a Layer<T>]) -> Vec<&'a Tensor<T>> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

fn layer_names(prefix: &str, names: &[String]) -> Vec<String> {
    names.iter().flat_map(|n| [format!("{prefix}.{n}.w"), format!("{prefix}.{n}.b")]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub convs: Vec<Layer<T>>,
    pub fcs: Vec<Layer<T>>,
    pub mu: Layer<T>,
    pub logvar: Layer<T>,
    pub logits: Layer<T>,
}

impl<T: Real> EncoderParams<T> {
    pub fn init<R: Rng + ?Sized>(arch: &ArchDescriptor, s: usize, dz: usize, rng: &mut R) -> Self {
        let mut c_in = arch.channels;
        let convs = arch
            .enc
            .iter()
            .map(|&c| {
                let l = Layer::conv(c_in, c, rng);
                c_in = c;
                l
            })
            .collect();
        let fcs = vec![
            Layer::dense(arch.flat_features(), arch.hidden, true, rng),
            Layer::dense(arch.hidden, arch.hidden, true, rng),
        ];
        EncoderParams {
            convs,
            fcs,
            mu: Layer::dense(arch.hidden, dz, false, rng),
            logvar: Layer::dense(arch.hidden, dz, false, rng),
            logits: Layer::dense(arch.hidden, s, false, rng),
        }
    }

    fn layers(&self) -> Vec<&Layer<T>> {
        self.convs.iter().chain(&self.fcs).chain([&self.mu, &self.logvar, &self.logits]).collect()
    }

    fn layer_names() -> Vec<String> {
        let mut n: Vec<String> = (0..5).map(|i| format!("conv{i}")).collect();
        n.extend(["fc0", "fc1", "mu", "logvar", "logits"].map(String::from));
        n
    }
}

impl<T: Real> ParamSet<T> for EncoderParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        layer_tensors(&self.layers())
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.convs
            .iter_mut()
            .chain(&mut self.fcs)
            .chain([&mut self.mu, &mut self.logvar, &mut self.logits])
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn names(&self, prefix: &str) -> Vec<String> {
        layer_names(prefix, &Self::layer_names())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    pub fc: Layer<T>,
    pub tconvs: Vec<Layer<T>>,
}

impl<T: Real> DecoderParams<T> {
    pub fn init<R: Rng + ?Sized>(arch: &ArchDescriptor, dz: usize, rng: &mut R) -> Self {
        let b = arch.bottleneck();
        let fc = Layer::dense(dz, b * b * arch.dec[0], true, rng);
        let widths = [arch.dec[1], arch.dec[2], arch.dec[3], arch.dec[4], arch.channels];
        let mut c_in = arch.dec[0];
        let tconvs = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let l = Layer::tconv(c_in, c, i < 4, rng);
                c_in = c;
                l
            })
            .collect();
        DecoderParams { fc, tconvs }
    }
}

impl<T: Real> ParamSet<T> for DecoderParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let layers: Vec<&Layer<T>> = std::iter::once(&self.fc).chain(&self.tconvs).collect();
        layer_tensors(&layers)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        std::iter::once(&mut self.fc)
            .chain(&mut self.tconvs)
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn names(&self, prefix: &str) -> Vec<String> {
        let mut n = vec!["fc".to_string()];
        n.extend((0..self.tconvs.len()).map(|i| format!("tconv{i}")));
        layer_names(prefix, &n)
    }
}

/// Mixture prior: `S` diagonal Gaussians with learnable means and log
/// standard deviations, and a fixed categorical weight vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmPrior<T> {
    pub mu: Tensor<T>,
    pub log_sigma: Tensor<T>,
    pub weights: Tensor<T>,
}

impl<T: Real> GmmPrior<T> {
    pub fn init<R: Rng + ?Sized>(s: usize, dz: usize, rng: &mut R) -> Self {
        GmmPrior {
            mu: Tensor::randn(&[s, dz], rng),
            log_sigma: Tensor::zeros(&[s, dz]),
            weights: Tensor::full(&[s], T::from_f64(1.0 / s as f64)),
        }
    }

    pub fn components(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn sigma(&self) -> Tensor<T> {
        self.log_sigma.map(|v| v.exp())
    }
}

/// The trainable part is the means and log scales; weights stay fixed.
impl<T: Real> ParamSet<T> for GmmPrior<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.mu, &self.log_sigma]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.mu, &mut self.log_sigma]
    }

    fn names(&self, prefix: &str) -> Vec<String> {
        vec![format!("{prefix}.mu"), format!("{prefix}.log_sigma")]
    }
}

/// Encoder outputs for one patch, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub mu_hat: Tensor<T>,
    pub sigma_hat: Tensor<T>,
    pub y_hat: Tensor<T>,
    pub z: Tensor<T>,
    pub route: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: ArchDescriptor,
    pub encoder: EncoderParams<T>,
    pub prior: GmmPrior<T>,
    /// Stage-1 decoder; dropped once the routed decoders are trained.
    pub dummy: Option<DecoderParams<T>>,
    pub decoders: Vec<DecoderParams<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Fresh encoder, prior and dummy decoder plus `k` routed decoders, all
    /// drawn from `rng` in that order.
    pub fn build<R: Rng + ?Sized>(arch: &ArchDescriptor, s: usize, dz: usize, k: usize, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if s == 0 {
            return Err(Error::Construction { layer: "enc.logits".into(), detail: "need at least one mixture component".into() });
        }
        if dz == 0 {
            return Err(Error::Construction { layer: "enc.mu".into(), detail: "latent width must be >= 1".into() });
        }
        let encoder = EncoderParams::init(arch, s, dz, rng);
        let prior = GmmPrior::init(s, dz, rng);
        let dummy = Some(DecoderParams::init(arch, dz, rng));
        let decoders = (0..k).map(|_| DecoderParams::init(arch, dz, rng)).collect();
        Ok(ModelParams { arch: arch.clone(), encoder, prior, dummy, decoders })
    }

    pub fn components(&self) -> usize {
        self.prior.components()
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.mu.shape()[1]
    }

    /// `(name, tensor)` for every stored array, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.extend(self.encoder.names("enc").into_iter().zip(self.encoder.tensors()));
        out.extend(self.prior.names("prior").into_iter().zip(self.prior.tensors()));
        out.push(("prior.weights".into(), &self.prior.weights));
        if let Some(d) = &self.dummy {
            out.extend(d.names("dec0").into_iter().zip(d.tensors()));
        }
        for (i, d) in self.decoders.iter().enumerate() {
            out.extend(d.names(&format!("dec{}", i + 1)).into_iter().zip(d.tensors()));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.extend(self.encoder.names("enc").into_iter().zip(self.encoder.tensors_mut()));
        let GmmPrior { mu, log_sigma, weights } = &mut self.prior;
        out.push(("prior.mu".into(), mu));
        out.push(("prior.log_sigma".into(), log_sigma));
        out.push(("prior.weights".into(), weights));
        if let Some(d) = &mut self.dummy {
            out.extend(d.names("dec0").into_iter().zip(d.tensors_mut()));
        }
        for (i, d) in self.decoders.iter_mut().enumerate() {
            out.extend(d.names(&format!("dec{}", i + 1)).into_iter().zip(d.tensors_mut()));
        }
        out
    }

    /// Parameter counts: `(encoder, one decoder, all routed decoders)`.
    pub fn parameter_report(&self) -> (usize, usize, usize) {
        let one = self.decoders.first().or(self.dummy.as_ref()).map_or(0, |d| d.parameter_count());
        let all = self.decoders.iter().map(|d| d.parameter_count()).sum();
        (self.encoder.parameter_count(), one, all)
    }

    /// Encodes a batch of patches with `z = mu_hat` (no sampling).
    pub fn encode_deterministic(&self, patches: &Tensor<T>) -> Result<Vec<LatentCode<T>>> {
        self.encode_with(patches, None)
    }

    /// Encodes a batch of patches, sampling `z = mu_hat + eps * sigma_hat`.
    pub fn encode<R: Rng + ?Sized>(&self, patches: &Tensor<T>, rng: &mut R) -> Result<Vec<LatentCode<T>>> {
        let n = patches.shape().first().copied().unwrap_or(0);
        let eps = Tensor::randn(&[n, self.latent_dim()], rng);
        self.encode_with(patches, Some(&eps))
    }

    pub fn encode_with(&self, patches: &Tensor<T>, eps: Option<&Tensor<T>>) -> Result<Vec<LatentCode<T>>> {
        let mut g = Graph::new();
        let vars = self.encoder.bind(&mut g, false);
        let x = g.constant(patches.clone());
        let out = encoder_forward(&mut g, &self.arch, &vars, x)?;
        let z = match eps {
            Some(e) => {
                let e = g.constant(e.clone());
                reparameterize(&mut g, out.mu, out.logvar, e)?
            }
            None => out.mu,
        };
        let (mu, logvar, y, z) = (g.value(out.mu), g.value(out.logvar), g.value(out.y_hat), g.value(z));
        let sigma = logvar.map(|v| (v * T::from_f64(0.5)).exp());
        let codes = (0..mu.shape()[0])
            .map(|i| {
                let y_hat = y.select_rows(&[i]).reshape(&[y.shape()[1]])?;
                let route = route(y_hat.data());
                Ok(LatentCode {
                    mu_hat: mu.select_rows(&[i]).reshape(&[mu.shape()[1]])?,
                    sigma_hat: sigma.select_rows(&[i]).reshape(&[mu.shape()[1]])?,
                    z: z.select_rows(&[i]).reshape(&[mu.shape()[1]])?,
                    y_hat,
                    route,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if codes.iter().any(|c| !c.mu_hat.all_finite() || !c.sigma_hat.all_finite() || !c.z.all_finite()) {
            return Err(Error::Numeric("encoder produced a non-finite latent".into()));
        }
        Ok(codes)
    }

    /// Decodes `z: [N, dz]` with `decoder` to `[N, D, D, C]`.
    pub fn decode(&self, z: &Tensor<T>, decoder: &DecoderParams<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = decoder.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = decoder_forward(&mut g, &self.arch, &vars, zv)?;
        let out = g.value(out).clone();
        if !out.all_finite() {
            return Err(Error::Numeric("decoder produced a non-finite patch".into()));
        }
        Ok(out)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn route<T: Real>(y_hat: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in y_hat.iter().enumerate() {
        if v > y_hat[best] {
            best = i;
        }
    }
    best
}

/// Encoder heads on the tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOut {
    pub mu: Var,
    pub logvar: Var,
    pub logits: Var,
    pub y_hat: Var,
}

fn construction(layer: String, e: Error) -> Error {
    match e {
        Error::Dimension { detail, .. } => Error::Construction { layer, detail },
        other => other,
    }
}

/// `x: [N, D, D, C]` through the encoder bound as `vars`.
pub fn encoder_forward<T: Real>(g: &mut Graph<T>, arch: &ArchDescriptor, vars: &[Var], x: Var) -> Result<EncoderOut> {
    let n = g.value(x).shape().first().copied().unwrap_or(0);
    let layer = |i: usize| (vars[2 * i], vars[2 * i + 1]);
    let mut h = x;
    for (i, &stride) in ArchDescriptor::ENCODER_STRIDES.iter().enumerate() {
        let (w, b) = layer(i);
        let name = || format!("enc.conv{i}");
        h = g.conv2d(h, w, stride, Padding::Same).map_err(|e| construction(name(), e))?;
        h = g.bias_add(h, b).map_err(|e| construction(name(), e))?;
        h = g.relu(h);
    }
    h = g.reshape(h, &[n, arch.flat_features()]).map_err(|e| construction("enc.flatten".into(), e))?;
    for i in 5..7 {
        let (w, b) = layer(i);
        h = g.dense(h, w, b).map_err(|e| construction(format!("enc.fc{}", i - 5), e))?;
        h = g.relu(h);
    }
    let (w, b) = layer(7);
    let mu = g.dense(h, w, b)?;
    let (w, b) = layer(8);
    let logvar = g.dense(h, w, b)?;
    let (w, b) = layer(9);
    let logits = g.dense(h, w, b)?;
    let y_hat = g.softmax(logits)?;
    Ok(EncoderOut { mu, logvar, logits, y_hat })
}

/// `z = mu + eps * exp(logvar / 2)`.
pub fn reparameterize<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let sigma = g.exp(half);
    let noise = g.mul(eps, sigma)?;
    g.add(mu, noise)
}

/// `z: [N, dz]` through the decoder bound as `vars`, giving `[N, D, D, C]`.
pub fn decoder_forward<T: Real>(g: &mut Graph<T>, arch: &ArchDescriptor, vars: &[Var], z: Var) -> Result<Var> {
    let n = g.value(z).shape().first().copied().unwrap_or(0);
    let b = arch.bottleneck();
    let mut h = g.dense(z, vars[0], vars[1]).map_err(|e| construction("dec.fc".into(), e))?;
    h = g.relu(h);
    h = g.reshape(h, &[n, b, b, arch.dec[0]])?;
    for i in 0..5 {
        let (w, bias) = (vars[2 + 2 * i], vars[3 + 2 * i]);
        let name = || format!("dec.tconv{i}");
        h = g.conv2d_transpose(h, w, 1, Padding::Same).map_err(|e| construction(name(), e))?;
        h = g.bias_add(h, bias).map_err(|e| construction(name(), e))?;
        h = if i < 4 { g.relu(h) } else { g.sigmoid(h) };
        if i == 0 || i == 2 {
            h = g.upsample2x(h)?;
        }
    }
    Ok(h)
}
