//! Training objectives.
//!
//! Graph-level builders append a loss to a [`Graph`] and return the scalar
//! node; the plain `f64` functions evaluate the same quantities directly and
//! double as reference implementations. All reductions are sums over the
//! batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decoder_forward, encoder_forward, route, ArchDescriptor, EncoderOut};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    /// Component KLs weighted by the soft label.
    Soft,
    /// Only the argmax component's KL.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda_y: f64,
    pub lambda_reg: f64,
    pub tau: f64,
    pub kl_mode: KlMode,
    /// Negate the Gaussian KL and drop its `-1/2` per dimension.
    /// Not a sensible minimisation target; kept for comparison runs.
    pub literal_kl: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.1,
            lambda_y: 1.0,
            lambda_reg: 1e-5,
            tau: 0.5,
            kl_mode: KlMode::Soft,
            literal_kl: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta >= 0.0 && self.lambda_y >= 0.0 && self.lambda_reg >= 0.0 && self.tau > 0.0;
        if !ok || ![self.beta, self.lambda_y, self.lambda_reg, self.tau].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights need beta, lambda_y, lambda_reg >= 0 and tau > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Sum over the batch of squared Frobenius norms of `recon - target`.
pub fn mse_loss<T: Real>(recon: &[Tensor<T>], target: &[Tensor<T>]) -> Result<f64> {
    if recon.len() != target.len() {
        return Err(Error::dim("mse_loss", format!("{} reconstructions vs {} targets", recon.len(), target.len())));
    }
    let mut total = 0.0;
    for (r, t) in recon.iter().zip(target) {
        if r.shape() != t.shape() {
            return Err(Error::dim("mse_loss", format!("{:?} vs {:?}", r.shape(), t.shape())));
        }
        total += r.data().iter().zip(t.data()).map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2)).sum::<f64>();
    }
    Ok(total)
}

/// `KL(N(mu_hat, sigma_hat^2) || N(mu_s, sigma_s^2))` for diagonal Gaussians.
///
/// With `literal` set, returns `-(KL + dz/2)` instead.
pub fn gaussian_kl(mu_hat: &[f64], sigma_hat: &[f64], mu_s: &[f64], sigma_s: &[f64], literal: bool) -> Result<f64> {
    let dz = mu_hat.len();
    if sigma_hat.len() != dz || mu_s.len() != dz || sigma_s.len() != dz {
        return Err(Error::dim("gaussian_kl", "all four vectors must share one length"));
    }
    if let Some(bad) = sigma_hat.iter().chain(sigma_s).find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("gaussian_kl: scale {bad} must be > 0")));
    }
    let kl: f64 = (0..dz)
        .map(|i| {
            (sigma_s[i] / sigma_hat[i]).ln() + (sigma_hat[i].powi(2) + (mu_hat[i] - mu_s[i]).powi(2)) / (2.0 * sigma_s[i].powi(2))
                - 0.5
        })
        .sum();
    Ok(if literal { -(kl + 0.5 * dz as f64) } else { kl })
}

/// `sum_s y_hat_s log(y_hat_s / y_prior_s)` with `0 log 0 = 0`.
pub fn categorical_kl(y_hat: &[f64], y_prior: &[f64]) -> Result<f64> {
    if y_hat.len() != y_prior.len() {
        return Err(Error::dim("categorical_kl", format!("{} vs {}", y_hat.len(), y_prior.len())));
    }
    if let Some(bad) = y_prior.iter().find(|&&p| !(p > 0.0)) {
        return Err(Error::Domain(format!("categorical_kl: prior entry {bad} must be > 0")));
    }
    Ok(y_hat.iter().zip(y_prior).map(|(&q, &p)| if q > 0.0 { q * (q / p).ln() } else { 0.0 }).sum())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `sum ||recon - target||^2` on the tape.
pub fn mse_term<T: Real>(g: &mut Graph<T>, recon: Var, target: Var) -> Result<Var> {
    let d = g.sub(recon, target)?;
    Ok(g.sum_squares(d))
}

/// Sum of squared entries over every var in `vars`.
pub fn l2_term<T: Real>(g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = g.constant(Tensor::scalar(T::zero()));
    for &v in vars {
        let s = g.sum_squares(v);
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

fn add_scalar<T: Real>(g: &mut Graph<T>, x: Var, c: f64) -> Result<Var> {
    let k = g.constant(Tensor::scalar(T::from_f64(c)));
    g.add(x, k)
}

/// One-hot `[N, S]` rows for the argmax of each row of `y_hat`.
fn hard_assignment<T: Real>(y_hat: &Tensor<T>) -> Tensor<T> {
    let (n, s) = (y_hat.shape()[0], y_hat.shape()[1]);
    let mut out = Tensor::zeros(&[n, s]);
    for (i, row) in y_hat.data().chunks(s).enumerate() {
        out.set(&[i, route(row)], T::one());
    }
    out
}

/// Gaussian part of the mixture KL, summed over the batch.
pub fn gaussian_kl_term<T: Real>(
    g: &mut Graph<T>,
    enc: &EncoderOut,
    prior_mu: Var,
    prior_log_sigma: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let kl = g.gmm_gaussian_kl(enc.mu, enc.logvar, prior_mu, prior_log_sigma)?;
    let weights = match cfg.kl_mode {
        KlMode::Soft => enc.y_hat,
        KlMode::Hard => {
            let onehot = hard_assignment(g.value(enc.y_hat));
            g.constant(onehot)
        }
    };
    let weighted = g.mul(kl, weights)?;
    let total = g.sum(weighted);
    if cfg.literal_kl {
        let [n, dz] = [g.value(enc.mu).shape()[0], g.value(enc.mu).shape()[1]];
        let neg = g.scale(total, -1.0);
        add_scalar(g, neg, -0.5 * (n * dz) as f64)
    } else {
        Ok(total)
    }
}

/// Categorical part of the mixture KL, summed over the batch.
pub fn categorical_kl_term<T: Real>(g: &mut Graph<T>, enc: &EncoderOut, prior_weights: &Tensor<T>) -> Result<Var> {
    let (n, s) = (g.value(enc.logits).shape()[0], g.value(enc.logits).shape()[1]);
    if prior_weights.shape() != [s] {
        return Err(Error::dim("categorical_kl", format!("prior {:?} for {s} components", prior_weights.shape())));
    }
    if let Some(p) = prior_weights.data().iter().find(|&&p| !(p > T::zero())) {
        return Err(Error::Domain(format!("categorical_kl: prior entry {} must be > 0", p.to_f64_lossy())));
    }
    let log_prior: Vec<T> = (0..n).flat_map(|_| prior_weights.data().iter().map(|p| p.ln())).collect();
    let log_prior = g.constant(Tensor::new(&[n, s], log_prior)?);
    let log_q = g.log_softmax(enc.logits)?;
    let ratio = g.sub(log_q, log_prior)?;
    let terms = g.mul(enc.y_hat, ratio)?;
    Ok(g.sum(terms))
}

/// Parameter handles on a graph for one encoder-stage forward pass.
pub struct EncoderStageVars<'a> {
    pub encoder: &'a [Var],
    pub prior_mu: Var,
    pub prior_log_sigma: Var,
    pub dummy: &'a [Var],
}

/// Scalar nodes making up the encoder-stage objective.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLoss {
    pub total: Var,
    pub mse: Var,
    pub gaussian_kl: Var,
    pub categorical_kl: Var,
    pub reg: Var,
    pub enc: EncoderOut,
    pub z: Var,
}

/// `MSE(r_0(z), target) + beta * (KL_gauss + lambda_y * KL_cat) + lambda_reg * (|theta|^2 + |psi_0|^2)`.
///
/// `eps` is the standard-normal draw for the reparameterised sample.
#[allow(clippy::too_many_arguments)]
pub fn encoder_loss<T: Real>(
    g: &mut Graph<T>,
    arch: &ArchDescriptor,
    vars: &EncoderStageVars<'_>,
    prior_weights: &Tensor<T>,
    input: Var,
    target: Var,
    eps: Var,
    cfg: &LossConfig,
) -> Result<EncoderLoss> {
    if g.value(input).shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Contract("encoder_loss on an empty batch".into()));
    }
    let enc = encoder_forward(g, arch, vars.encoder, input)?;
    let z = crate::model::reparameterize(g, enc.mu, enc.logvar, eps)?;
    let recon = decoder_forward(g, arch, vars.dummy, z)?;
    let mse = mse_term(g, recon, target)?;
    let gaussian_kl = gaussian_kl_term(g, &enc, vars.prior_mu, vars.prior_log_sigma, cfg)?;
    let mut categorical_kl = categorical_kl_term(g, &enc, prior_weights)?;
    if cfg.literal_kl {
        categorical_kl = g.scale(categorical_kl, -1.0);
    }
    let weighted_cat = g.scale(categorical_kl, cfg.lambda_y);
    let kl = g.add(gaussian_kl, weighted_cat)?;
    let kl = g.scale(kl, cfg.beta);
    let reg_vars: Vec<Var> = vars.encoder.iter().chain(vars.dummy).copied().collect();
    let reg = l2_term(g, &reg_vars)?;
    let reg_scaled = g.scale(reg, cfg.lambda_reg);
    let total = g.add(mse, kl)?;
    let total = g.add(total, reg_scaled)?;
    Ok(EncoderLoss { total, mse, gaussian_kl, categorical_kl, reg, enc, z })
}

#[derive(Clone, Debug)]
pub struct DecoderLoss {
    pub total: Var,
    pub mse: Var,
    pub reg: Var,
    /// Patches routed to each decoder.
    pub counts: Vec<usize>,
}

/// Routed reconstruction loss for stage 2.
///
/// `z` and `target` are plain values (the encoder is frozen). Patch `n`
/// goes through decoder `routes[n]`. Decoders that receive no patch do not
/// appear on the graph at all, so their gradients are exactly zero; the
/// regulariser covers only decoders that were used.
pub fn decoder_loss<T: Real>(
    g: &mut Graph<T>,
    arch: &ArchDescriptor,
    decoders: &[Vec<Var>],
    z: &Tensor<T>,
    routes: &[usize],
    target: &Tensor<T>,
    lambda_reg: f64,
) -> Result<DecoderLoss> {
    let n = z.shape().first().copied().unwrap_or(0);
    if routes.len() != n || target.shape().first() != Some(&n) {
        return Err(Error::dim(
            "decoder_loss",
            format!("{n} latents, {} routes, targets {:?}", routes.len(), target.shape()),
        ));
    }
    if let Some(&r) = routes.iter().find(|&&r| r >= decoders.len()) {
        return Err(Error::Contract(format!("route {r} out of range for {} decoders", decoders.len())));
    }
    let mut counts = vec![0; decoders.len()];
    let mut mse = g.constant(Tensor::scalar(T::zero()));
    let mut reg = g.constant(Tensor::scalar(T::zero()));
    for (i, dec) in decoders.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&j| routes[j] == i).collect();
        counts[i] = rows.len();
        if rows.is_empty() {
            continue;
        }
        let zi = g.constant(z.select_rows(&rows));
        let ti = g.constant(target.select_rows(&rows));
        let recon = decoder_forward(g, arch, dec, zi)?;
        let m = mse_term(g, recon, ti)?;
        mse = g.add(mse, m)?;
        let r = l2_term(g, dec)?;
        reg = g.add(reg, r)?;
    }
    let reg_scaled = g.scale(reg, lambda_reg);
    let total = g.add(mse, reg_scaled)?;
    Ok(DecoderLoss { total, mse, reg, counts })
}

/// NT-Xent over `z: [2N, d]` where rows `2k` and `2k + 1` are positives.
pub fn nt_xent_term<T: Real>(g: &mut Graph<T>, z: Var, tau: f64) -> Result<Var> {
    let m = match *g.value(z).shape() {
        [m, _] if m >= 2 && m % 2 == 0 => m,
        ref s => return Err(Error::dim("nt_xent", format!("need [2N, d] with N >= 1, got {s:?}"))),
    };
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("nt_xent: temperature {tau} must be > 0")));
    }
    let zn = g.l2_normalize_rows(z)?;
    let zt = g.transpose(zn)?;
    let sim = g.matmul(zn, zt)?;
    let logits = g.scale(sim, 1.0 / tau);
    // Large negative on the diagonal drops k = i from the denominator.
    let mut mask = Tensor::zeros(&[m, m]);
    let mut positives = Tensor::zeros(&[m, m]);
    for i in 0..m {
        mask.set(&[i, i], T::from_f64(-1e9));
        positives.set(&[i, i ^ 1], T::one());
    }
    let mask = g.constant(mask);
    let logits = g.add(logits, mask)?;
    let log_p = g.log_softmax(logits)?;
    let positives = g.constant(positives);
    let picked = g.mul(log_p, positives)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / m as f64))
}

/// Value of [`nt_xent_term`] for a list of embeddings.
pub fn nt_xent_loss<T: Real>(z: &[Tensor<T>], tau: f64) -> Result<f64> {
    let refs: Vec<&Tensor<T>> = z.iter().collect();
    let stacked = Tensor::stack(&refs)?;
    let mut g = Graph::new();
    let v = g.constant(stacked);
    let out = nt_xent_term(&mut g, v, tau)?;
    Ok(g.value(out).item().to_f64_lossy())
}
