//! Autoencoder variants and their implemented loss functions.
//!
//! Four model kinds share one structure: a deterministic autoencoder, the
//! classical VAE, the beta-VAE (both with diagonal posteriors), and the
//! full-covariance variant whose encoder emits a Cholesky factor. The
//! reconstruction loss is an unreduced sum over output coordinates and a
//! mean over the batch; the KL term is weighted by beta on top of that.
//! This convention is recorded in every emitted report header because it
//! sets the scale of beta.

use std::io::{BufRead, Write};

use rand::Rng;
use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::nets::{MlpNetwork, NetError, OptimizerState};
use crate::rng::fill_standard_normal;
use crate::tol;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("linalg: {0}")]
    Linalg(#[from] linalg::LinalgError),
    #[error("operation needs a {expected} model, got {got}")]
    WrongKind { expected: &'static str, got: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("a latent-rotated model cannot be trained further")]
    RotatedModelNotTrainable,
    #[error("diagonal posteriors are not closed under latent rotation")]
    DiagonalNotRotatable,
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Encoder scale output: diagonal log-variances or a full lower-triangular
/// covariance factor with positive diagonal (`Sigma = L L^T`).
#[derive(Debug, Clone)]
pub enum PosteriorScale {
    DiagLogVar(Vec<f64>),
    FullFactor(Matrix),
}

/// Per-sample encoder output.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub scale: PosteriorScale,
}

impl GaussianPosterior {
    pub fn diag(mean: Vec<f64>, logvar: Vec<f64>) -> GaussianPosterior {
        assert_eq!(mean.len(), logvar.len());
        GaussianPosterior { mean, scale: PosteriorScale::DiagLogVar(logvar) }
    }

    pub fn full(mean: Vec<f64>, factor: Matrix) -> Result<GaussianPosterior> {
        let d = mean.len();
        if factor.rows() != d || factor.cols() != d {
            return Err(ModelError::Invalid("covariance factor must be d x d".into()));
        }
        for i in 0..d {
            if factor.get(i, i) <= 0.0 {
                return Err(ModelError::Invalid(format!(
                    "covariance factor diagonal entry {i} is not positive"
                )));
            }
            for j in (i + 1)..d {
                if factor.get(i, j) != 0.0 {
                    return Err(ModelError::Invalid("covariance factor must be lower triangular".into()));
                }
            }
        }
        Ok(GaussianPosterior { mean, scale: PosteriorScale::FullFactor(factor) })
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.len()
    }

    /// Per-coordinate variances; diagonal scale only.
    pub fn variances(&self) -> Result<Vec<f64>> {
        match &self.scale {
            PosteriorScale::DiagLogVar(lv) => Ok(lv.iter().map(|v| v.exp()).collect()),
            PosteriorScale::FullFactor(_) => Err(ModelError::WrongKind {
                expected: "diagonal-posterior",
                got: "full-covariance",
            }),
        }
    }
}

/// Closed-form KL divergence to the standard normal prior for a diagonal
/// posterior: `1/2 sum_j (mu_j^2 + s2_j - log s2_j - 1)`.
pub fn kl_diagonal(post: &GaussianPosterior) -> Result<f64> {
    match &post.scale {
        PosteriorScale::DiagLogVar(logvar) => {
            let mut acc = 0.0;
            for (mu, lv) in post.mean.iter().zip(logvar) {
                acc += mu * mu + lv.exp() - lv - 1.0;
            }
            Ok(0.5 * acc)
        }
        PosteriorScale::FullFactor(_) => Err(ModelError::WrongKind {
            expected: "diagonal-posterior",
            got: "full-covariance",
        }),
    }
}

/// KL to the standard normal prior for a full-covariance posterior:
/// `1/2 (|mu|^2 + tr(Sigma) - log det Sigma - d)` with
/// `log det Sigma = 2 sum_j log L_jj`.
pub fn kl_full(post: &GaussianPosterior) -> Result<f64> {
    match &post.scale {
        PosteriorScale::FullFactor(l) => {
            let d = post.latent_dim();
            let mut trace = 0.0;
            let mut logdet = 0.0;
            for i in 0..d {
                for j in 0..=i {
                    let v = l.get(i, j);
                    trace += v * v;
                }
                let diag = l.get(i, i);
                if diag <= 0.0 {
                    return Err(ModelError::Invalid("non-positive factor diagonal".into()));
                }
                logdet += 2.0 * diag.ln();
            }
            let mu2: f64 = post.mean.iter().map(|m| m * m).sum();
            Ok(0.5 * (mu2 + trace - logdet - d as f64))
        }
        PosteriorScale::DiagLogVar(_) => Err(ModelError::WrongKind {
            expected: "full-covariance",
            got: "diagonal-posterior",
        }),
    }
}

/// Polarized-regime KL approximation: active coordinates only, with the
/// vanished variance term dropped: `1/2 sum_{j in active} (mu_j^2 - log s2_j - 1)`.
pub fn kl_approx_polarized(post: &GaussianPosterior, active: &[usize]) -> Result<f64> {
    match &post.scale {
        PosteriorScale::DiagLogVar(logvar) => {
            let mut acc = 0.0;
            for &j in active {
                acc += post.mean[j] * post.mean[j] - logvar[j] - 1.0;
            }
            Ok(0.5 * acc)
        }
        PosteriorScale::FullFactor(_) => Err(ModelError::WrongKind {
            expected: "diagonal-posterior",
            got: "full-covariance",
        }),
    }
}

/// Per-step loss record.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub rec_total: f64,
    pub rec_deterministic: f64,
    pub rec_stochastic: f64,
    pub kl: f64,
    pub kl_approx: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.rec_total + self.beta * self.kl
    }

    pub fn is_finite(&self) -> bool {
        self.rec_total.is_finite()
            && self.rec_deterministic.is_finite()
            && self.rec_stochastic.is_finite()
            && self.kl.is_finite()
            && self.kl_approx.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ae,
    Vae,
    BetaVae,
    BetaVaeFull,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Ae => "ae",
            ModelKind::Vae => "vae",
            ModelKind::BetaVae => "beta_vae",
            ModelKind::BetaVaeFull => "beta_vae_full",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "ae" => Ok(ModelKind::Ae),
            "vae" => Ok(ModelKind::Vae),
            "beta_vae" => Ok(ModelKind::BetaVae),
            "beta_vae_full" => Ok(ModelKind::BetaVaeFull),
            other => Err(ModelError::Invalid(format!("unknown model kind '{other}'"))),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        !matches!(self, ModelKind::Ae)
    }

    pub fn has_full_covariance(&self) -> bool {
        matches!(self, ModelKind::BetaVaeFull)
    }

    /// Encoder head width for a given latent dimension.
    pub fn encoder_output_dim(&self, latent_dim: usize) -> usize {
        match self {
            ModelKind::Ae => latent_dim,
            ModelKind::Vae | ModelKind::BetaVae => 2 * latent_dim,
            ModelKind::BetaVaeFull => 2 * latent_dim + latent_dim * (latent_dim - 1) / 2,
        }
    }
}

/// Flat index of the strict lower-triangular factor entry `(j, k)`, `j > k`,
/// within the encoder head (after the mean and diagonal blocks).
fn lower_index(latent_dim: usize, j: usize, k: usize) -> usize {
    2 * latent_dim + j * (j - 1) / 2 + k
}

#[derive(Debug, Clone)]
pub struct AutoencoderModel {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub encoder: MlpNetwork,
    pub decoder: MlpNetwork,
    /// Covariance rotation carried by `apply_latent_rotation` on the
    /// full-covariance model. The mean head and the decoder are rotated
    /// exactly through their weights; the factor head output is rotated at
    /// encode time (`L <- chol(Q L L^T Q^T)`), which no weight edit can
    /// express.
    latent_rotation: Option<Matrix>,
}

impl AutoencoderModel {
    pub fn new(
        kind: ModelKind,
        latent_dim: usize,
        encoder: MlpNetwork,
        decoder: MlpNetwork,
    ) -> Result<AutoencoderModel> {
        if encoder.output_dim() != kind.encoder_output_dim(latent_dim) {
            return Err(ModelError::Invalid(format!(
                "encoder outputs {} values, {} with latent dim {} needs {}",
                encoder.output_dim(),
                kind.name(),
                latent_dim,
                kind.encoder_output_dim(latent_dim)
            )));
        }
        if decoder.input_dim() != latent_dim {
            return Err(ModelError::Invalid("decoder input dim != latent dim".into()));
        }
        if decoder.output_dim() != encoder.input_dim() {
            return Err(ModelError::Invalid("decoder output dim != encoder input dim".into()));
        }
        Ok(AutoencoderModel { kind, latent_dim, encoder, decoder, latent_rotation: None })
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_rotation(&self) -> Option<&Matrix> {
        self.latent_rotation.as_ref()
    }

    /// Latent mean for any model kind (the deterministic code for the AE).
    pub fn encode_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        let raw = self.encoder.forward(x)?;
        Ok(raw[..self.latent_dim].to_vec())
    }

    /// Batched latent means, one row per sample.
    pub fn encode_mean_batch(&self, x: &Matrix) -> Result<Matrix> {
        let cache = self.encoder.forward_batch(x)?;
        let out = cache.output();
        Ok(Matrix::from_fn(x.rows(), self.latent_dim, |i, j| out.get(i, j)))
    }

    /// Full posterior for the stochastic kinds.
    pub fn encode_posterior(&self, x: &[f64]) -> Result<GaussianPosterior> {
        let raw = self.encoder.forward(x)?;
        self.posterior_from_raw(&raw)
    }

    pub fn encode_posterior_batch(&self, x: &Matrix) -> Result<Vec<GaussianPosterior>> {
        let cache = self.encoder.forward_batch(x)?;
        let out = cache.output();
        (0..x.rows()).map(|i| self.posterior_from_raw(out.row(i))).collect()
    }

    pub fn posterior_from_raw(&self, raw: &[f64]) -> Result<GaussianPosterior> {
        let d = self.latent_dim;
        match self.kind {
            ModelKind::Ae => Err(ModelError::WrongKind { expected: "stochastic", got: "ae" }),
            ModelKind::Vae | ModelKind::BetaVae => {
                Ok(GaussianPosterior::diag(raw[..d].to_vec(), raw[d..2 * d].to_vec()))
            }
            ModelKind::BetaVaeFull => {
                let mean = raw[..d].to_vec();
                let mut l = Matrix::zeros(d, d);
                for j in 0..d {
                    l.set(j, j, raw[d + j].exp());
                    for k in 0..j {
                        l.set(j, k, raw[lower_index(d, j, k)]);
                    }
                }
                let l = match &self.latent_rotation {
                    None => l,
                    Some(q) => {
                        let sigma = q.matmul(&l).matmul_bt(&q.matmul(&l));
                        linalg::cholesky_factor(&sigma)?
                    }
                };
                // the mean head is already weight-rotated
                GaussianPosterior::full(mean, l)
            }
        }
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decoder.forward(z)?)
    }

    /// Draws one reparametrized latent from the posterior.
    pub fn sample_latent(&self, post: &GaussianPosterior, rng: &mut impl Rng) -> Vec<f64> {
        let d = post.latent_dim();
        let mut eps = vec![0.0; d];
        fill_standard_normal(rng, &mut eps);
        latent_from_noise(post, &eps)
    }
}

/// `mu + scale * eps` for either scale kind.
pub fn latent_from_noise(post: &GaussianPosterior, eps: &[f64]) -> Vec<f64> {
    match &post.scale {
        PosteriorScale::DiagLogVar(lv) => post
            .mean
            .iter()
            .zip(lv)
            .zip(eps)
            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
            .collect(),
        PosteriorScale::FullFactor(l) => {
            let mut z = post.mean.clone();
            for i in 0..z.len() {
                let row = l.row(i);
                for (k, e) in eps.iter().enumerate().take(i + 1) {
                    z[i] += row[k] * e;
                }
            }
            z
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Deterministic/stochastic reconstruction split for one sample.
///
/// The deterministic part is evaluated exactly at the posterior mean; the
/// stochastic part uses a single reparametrized draw; the total is the
/// square loss at that same draw. KL fields are filled per kind.
pub fn reconstruction_losses(
    model: &AutoencoderModel,
    x: &[f64],
    beta: f64,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    match model.kind {
        ModelKind::Ae => {
            let z = model.encode_mean(x)?;
            let y = model.decode(&z)?;
            let rec = squared_distance(&y, x);
            Ok(LossBreakdown {
                rec_total: rec,
                rec_deterministic: rec,
                rec_stochastic: 0.0,
                kl: 0.0,
                kl_approx: 0.0,
                beta,
            })
        }
        _ => {
            let post = model.encode_posterior(x)?;
            let z = model.sample_latent(&post, rng);
            let y_mean = model.decode(&post.mean)?;
            let y_sample = model.decode(&z)?;
            let kl = if model.kind.has_full_covariance() {
                kl_full(&post)?
            } else {
                kl_diagonal(&post)?
            };
            Ok(LossBreakdown {
                rec_total: squared_distance(&y_sample, x),
                rec_deterministic: squared_distance(&y_mean, x),
                rec_stochastic: squared_distance(&y_sample, &y_mean),
                kl,
                kl_approx: 0.0,
                beta,
            })
        }
    }
}

/// Parameter gradients of one batch, flattened encoder-then-decoder, plus
/// the mean loss breakdown over the batch.
pub struct BatchGradients {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
    pub breakdown: LossBreakdown,
}

/// Gradient of the mean batch loss `rec_total + beta * KL` w.r.t. all
/// parameters. The reparametrization noise comes from `rng`, one draw per
/// sample. With `beta == 0` the KL gradient accumulation is skipped
/// entirely so the decoder gradients match a pure-reconstruction pass bit
/// for bit.
pub fn batch_gradients(
    model: &AutoencoderModel,
    batch: &Matrix,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<BatchGradients> {
    if model.latent_rotation.is_some() {
        return Err(ModelError::RotatedModelNotTrainable);
    }
    let b = batch.rows();
    let d = model.latent_dim;
    let inv_b = 1.0 / b as f64;

    let enc_cache = model.encoder.forward_batch(batch)?;
    let raw = enc_cache.output().clone();

    // sampling noise, one row per sample
    let mut eps = Matrix::zeros(b, d);
    for i in 0..b {
        fill_standard_normal(rng, eps.row_mut(i));
    }

    // build latents
    let mut z = Matrix::zeros(b, d);
    let mut posteriors: Vec<Option<GaussianPosterior>> = Vec::with_capacity(b);
    match model.kind {
        ModelKind::Ae => {
            for i in 0..b {
                z.row_mut(i).copy_from_slice(&raw.row(i)[..d]);
                posteriors.push(None);
            }
        }
        _ => {
            for i in 0..b {
                let post = model.posterior_from_raw(raw.row(i))?;
                z.row_mut(i).copy_from_slice(&latent_from_noise(&post, eps.row(i)));
                posteriors.push(Some(post));
            }
        }
    }

    let dec_cache = model.decoder.forward_batch(&z)?;
    let y = dec_cache.output();

    // reconstruction loss and its upstream gradient
    let mut rec_total = 0.0;
    let mut dec_upstream = Matrix::zeros(b, model.data_dim());
    for i in 0..b {
        let yrow = y.row(i);
        let xrow = batch.row(i);
        let urow = dec_upstream.row_mut(i);
        for j in 0..yrow.len() {
            let diff = yrow[j] - xrow[j];
            rec_total += diff * diff;
            urow[j] = 2.0 * diff * inv_b;
        }
    }
    rec_total *= inv_b;

    let dec_grads = model.decoder.backward_batch(&dec_cache, &dec_upstream)?;
    let dz = &dec_grads.input; // b x d

    // route gradients into the encoder head
    let mut enc_upstream = Matrix::zeros(b, model.encoder.output_dim());
    let mut kl_mean = 0.0;
    match model.kind {
        ModelKind::Ae => {
            for i in 0..b {
                enc_upstream.row_mut(i).copy_from_slice(dz.row(i));
            }
        }
        ModelKind::Vae | ModelKind::BetaVae => {
            for i in 0..b {
                let post = posteriors[i].as_ref().unwrap();
                let logvar = match &post.scale {
                    PosteriorScale::DiagLogVar(lv) => lv,
                    _ => unreachable!(),
                };
                let dzrow = dz.row(i);
                let erow = eps.row(i);
                let urow = enc_upstream.row_mut(i);
                for j in 0..d {
                    let sigma = (0.5 * logvar[j]).exp();
                    urow[j] = dzrow[j];
                    urow[d + j] = dzrow[j] * erow[j] * 0.5 * sigma;
                }
                if beta != 0.0 {
                    let w = beta * inv_b;
                    for j in 0..d {
                        urow[j] += w * post.mean[j];
                        urow[d + j] += w * 0.5 * (logvar[j].exp() - 1.0);
                    }
                }
                kl_mean += kl_diagonal(post)? * inv_b;
            }
        }
        ModelKind::BetaVaeFull => {
            for i in 0..b {
                let post = posteriors[i].as_ref().unwrap();
                let l = match &post.scale {
                    PosteriorScale::FullFactor(l) => l,
                    _ => unreachable!(),
                };
                let dzrow = dz.row(i);
                let erow = eps.row(i);
                let urow = enc_upstream.row_mut(i);
                let w = beta * inv_b;
                for j in 0..d {
                    urow[j] = dzrow[j];
                    // diagonal entries are exp-parametrized
                    let ljj = l.get(j, j);
                    urow[d + j] = dzrow[j] * erow[j] * ljj;
                    for k in 0..j {
                        urow[lower_index(d, j, k)] = dzrow[j] * erow[k];
                    }
                }
                if beta != 0.0 {
                    for j in 0..d {
                        urow[j] += w * post.mean[j];
                        let ljj = l.get(j, j);
                        urow[d + j] += w * (ljj * ljj - 1.0);
                        for k in 0..j {
                            urow[lower_index(d, j, k)] += w * l.get(j, k);
                        }
                    }
                }
                kl_mean += kl_full(post)? * inv_b;
            }
        }
    }

    let enc_grads = model.encoder.backward_batch(&enc_cache, &enc_upstream)?;

    // deterministic/stochastic split (values only, no gradient cost beyond
    // one extra decoder forward at the means)
    let mut rec_det = 0.0;
    let mut rec_stoch = 0.0;
    let kl_approx;
    if model.kind.is_stochastic() {
        let mut means = Matrix::zeros(b, d);
        for i in 0..b {
            means.row_mut(i).copy_from_slice(&posteriors[i].as_ref().unwrap().mean);
        }
        let det_cache = model.decoder.forward_batch(&means)?;
        let y_det = det_cache.output();
        for i in 0..b {
            rec_det += squared_distance(y_det.row(i), batch.row(i));
            rec_stoch += squared_distance(y_det.row(i), y.row(i));
        }
        rec_det *= inv_b;
        rec_stoch *= inv_b;
        kl_approx = if model.kind.has_full_covariance() {
            0.0
        } else {
            let posts: Vec<&GaussianPosterior> =
                posteriors.iter().map(|p| p.as_ref().unwrap()).collect();
            let active = batch_active_set(&posts);
            let mut acc = 0.0;
            for p in &posts {
                acc += kl_approx_polarized(p, &active)?;
            }
            acc * inv_b
        };
    } else {
        rec_det = rec_total;
        kl_approx = 0.0;
    }

    let mut enc_flat = Vec::with_capacity(model.encoder.param_count());
    MlpNetwork::flatten_grads_into(&enc_grads, &mut enc_flat);
    let mut dec_flat = Vec::with_capacity(model.decoder.param_count());
    MlpNetwork::flatten_grads_into(&dec_grads, &mut dec_flat);

    Ok(BatchGradients {
        encoder: enc_flat,
        decoder: dec_flat,
        breakdown: LossBreakdown {
            rec_total,
            rec_deterministic: rec_det,
            rec_stochastic: rec_stoch,
            kl: kl_mean,
            kl_approx,
            beta,
        },
    })
}

/// Active coordinates estimated from the posterior means of one batch
/// (empirical std above the shared threshold).
pub fn batch_active_set(posts: &[&GaussianPosterior]) -> Vec<usize> {
    if posts.len() < 2 {
        return Vec::new();
    }
    let d = posts[0].latent_dim();
    let n = posts.len() as f64;
    let mut active = Vec::new();
    for j in 0..d {
        let mean: f64 = posts.iter().map(|p| p.mean[j]).sum::<f64>() / n;
        let var: f64 =
            posts.iter().map(|p| (p.mean[j] - mean) * (p.mean[j] - mean)).sum::<f64>() / (n - 1.0);
        if var.sqrt() > tol::ACTIVE_STD_THRESHOLD {
            active.push(j);
        }
    }
    active
}

/// One optimizer step on the mean batch loss. Returns the loss breakdown
/// observed at the pre-update parameters.
pub fn training_step(
    model: &mut AutoencoderModel,
    batch: &Matrix,
    beta: f64,
    enc_opt: &mut OptimizerState,
    dec_opt: &mut OptimizerState,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let grads = batch_gradients(model, batch, beta, rng)?;
    if !grads.breakdown.is_finite() {
        return Err(ModelError::NonFiniteLoss { step: enc_opt.step_count() });
    }
    let mut theta = Vec::with_capacity(model.encoder.param_count());
    model.encoder.flatten_params_into(&mut theta);
    enc_opt.step(&mut theta, &grads.encoder)?;
    model.encoder.set_params_from(&theta)?;

    theta.clear();
    model.decoder.flatten_params_into(&mut theta);
    dec_opt.step(&mut theta, &grads.decoder)?;
    model.decoder.set_params_from(&theta)?;
    Ok(grads.breakdown)
}

/// Mean loss breakdown over a dataset slice without touching parameters.
pub fn evaluate_breakdown(
    model: &AutoencoderModel,
    data: &Matrix,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let b = data.rows();
    let inv_b = 1.0 / b as f64;
    let mut acc = LossBreakdown { beta, ..Default::default() };
    match model.kind {
        ModelKind::Ae => {
            let means = model.encode_mean_batch(data)?;
            let cache = model.decoder.forward_batch(&means)?;
            let y = cache.output();
            for i in 0..b {
                let rec = squared_distance(y.row(i), data.row(i));
                acc.rec_total += rec * inv_b;
                acc.rec_deterministic += rec * inv_b;
            }
        }
        _ => {
            let posts = model.encode_posterior_batch(data)?;
            let d = model.latent_dim;
            let mut z = Matrix::zeros(b, d);
            let mut means = Matrix::zeros(b, d);
            let mut eps_row = vec![0.0; d];
            for i in 0..b {
                fill_standard_normal(rng, &mut eps_row);
                z.row_mut(i).copy_from_slice(&latent_from_noise(&posts[i], &eps_row));
                means.row_mut(i).copy_from_slice(&posts[i].mean);
            }
            let y_sample = model.decoder.forward_batch(&z)?;
            let y_mean = model.decoder.forward_batch(&means)?;
            let refs: Vec<&GaussianPosterior> = posts.iter().collect();
            let active = if model.kind.has_full_covariance() { Vec::new() } else { batch_active_set(&refs) };
            for i in 0..b {
                acc.rec_total += squared_distance(y_sample.output().row(i), data.row(i)) * inv_b;
                acc.rec_deterministic +=
                    squared_distance(y_mean.output().row(i), data.row(i)) * inv_b;
                acc.rec_stochastic +=
                    squared_distance(y_sample.output().row(i), y_mean.output().row(i)) * inv_b;
                if model.kind.has_full_covariance() {
                    acc.kl += kl_full(&posts[i])? * inv_b;
                } else {
                    acc.kl += kl_diagonal(&posts[i])? * inv_b;
                    acc.kl_approx += kl_approx_polarized(&posts[i], &active)? * inv_b;
                }
            }
        }
    }
    Ok(acc)
}

/// Rotates the latent space of the model by the orthogonal matrix `q`.
///
/// The encoder mean head and the decoder first layer absorb the rotation as
/// exact weight edits. The full-covariance factor head cannot (the
/// re-triangularization is nonlinear in the head outputs), so the rotation
/// is stored and applied at encode time. Diagonal-posterior models are
/// rejected: that family is not closed under rotation.
pub fn apply_latent_rotation(model: &AutoencoderModel, q: &Matrix) -> Result<AutoencoderModel> {
    let d = model.latent_dim;
    if q.rows() != d || q.cols() != d {
        return Err(ModelError::Invalid("rotation must be d x d".into()));
    }
    let qtq = q.gram();
    if qtq.sub(&Matrix::identity(d)).max_abs() > 1e-8 {
        return Err(ModelError::Invalid("rotation is not orthogonal".into()));
    }
    if matches!(model.kind, ModelKind::Vae | ModelKind::BetaVae) {
        return Err(ModelError::DiagonalNotRotatable);
    }

    let mut out = model.clone();

    // encoder mean head: rows 0..d of the final layer get Q applied
    {
        let layers = out.encoder.layers_mut();
        let last = layers.last_mut().unwrap();
        let in_dim = last.weight.cols();
        let mean_rows: Vec<Vec<f64>> = (0..d).map(|r| last.weight.row(r).to_vec()).collect();
        let mean_bias: Vec<f64> = last.bias[..d].to_vec();
        for r in 0..d {
            let mut new_row = vec![0.0; in_dim];
            let mut new_b = 0.0;
            for k in 0..d {
                let qrk = q.get(r, k);
                new_b += qrk * mean_bias[k];
                for c in 0..in_dim {
                    new_row[c] += qrk * mean_rows[k][c];
                }
            }
            last.weight.row_mut(r).copy_from_slice(&new_row);
            last.bias[r] = new_b;
        }
    }

    // decoder first layer pre-composes with Q^T: W <- W Q^T
    {
        let layers = out.decoder.layers_mut();
        let first = layers.first_mut().unwrap();
        first.weight = first.weight.matmul(&q.transpose());
    }

    if model.kind.has_full_covariance() {
        out.latent_rotation = Some(match &model.latent_rotation {
            None => q.clone(),
            Some(prev) => q.matmul(prev),
        });
    }
    Ok(out)
}

/// Total implemented losses of a full-covariance model and its rotated
/// counterpart on one sample, evaluated with matched whitened noise.
///
/// The rotated model's factor is a re-triangularized square root of the
/// same covariance, so the common noise `eps` is carried across through the
/// orthogonal map `W = L'^{-1} Q L`; with that correspondence the two
/// losses agree exactly (up to roundoff), which is the rotational symmetry
/// of the full-covariance objective.
pub fn rotated_loss_pair(
    original: &AutoencoderModel,
    rotated: &AutoencoderModel,
    q: &Matrix,
    x: &[f64],
    beta: f64,
    eps: &[f64],
) -> Result<(f64, f64)> {
    if !original.kind.has_full_covariance() || !rotated.kind.has_full_covariance() {
        return Err(ModelError::WrongKind { expected: "full-covariance", got: "other" });
    }
    let post0 = original.encode_posterior(x)?;
    let post1 = rotated.encode_posterior(x)?;
    let l0 = match &post0.scale {
        PosteriorScale::FullFactor(l) => l.clone(),
        _ => unreachable!(),
    };
    let l1 = match &post1.scale {
        PosteriorScale::FullFactor(l) => l.clone(),
        _ => unreachable!(),
    };
    // W = L1^{-1} Q L0, orthogonal because L1 L1^T = Q L0 L0^T Q^T
    let ql0 = q.matmul(&l0);
    let d = original.latent_dim;
    let mut w = Matrix::zeros(d, d);
    for c in 0..d {
        let col = linalg::solve_lower_triangular(&l1, &ql0.column(c));
        w.set_column(c, &col);
    }
    let eps1 = w.matvec(eps);

    let z0 = latent_from_noise(&post0, eps);
    let z1 = latent_from_noise(&post1, &eps1);
    let y0 = original.decode(&z0)?;
    let y1 = rotated.decode(&z1)?;
    let loss0 = squared_distance(&y0, x) + beta * kl_full(&post0)?;
    let loss1 = squared_distance(&y1, x) + beta * kl_full(&post1)?;
    Ok((loss0, loss1))
}

const MODEL_MAGIC: &str = "vaepca-model v1";

pub fn write_model(model: &AutoencoderModel, w: &mut impl Write) -> Result<()> {
    writeln!(w, "{MODEL_MAGIC}").map_err(NetError::Io)?;
    writeln!(w, "kind {} latent {}", model.kind.name(), model.latent_dim).map_err(NetError::Io)?;
    match &model.latent_rotation {
        None => writeln!(w, "rotation none").map_err(NetError::Io)?,
        Some(q) => {
            let vals: Vec<String> = q.data().iter().map(|v| v.to_string()).collect();
            writeln!(w, "rotation {} {}", q.rows(), vals.join(" ")).map_err(NetError::Io)?;
        }
    }
    model.encoder.write_checkpoint(w)?;
    model.decoder.write_checkpoint(w)?;
    Ok(())
}

pub fn read_model(r: impl BufRead) -> Result<AutoencoderModel> {
    let mut lines = r.lines();
    let magic = lines
        .next()
        .ok_or_else(|| NetError::Parse("empty model file".into()))?
        .map_err(NetError::Io)?;
    if magic != MODEL_MAGIC {
        return Err(NetError::Parse(format!("bad model header '{magic}'")).into());
    }
    let meta = lines
        .next()
        .ok_or_else(|| NetError::Parse("missing model meta line".into()))?
        .map_err(NetError::Io)?;
    let fields: Vec<&str> = meta.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "kind" || fields[2] != "latent" {
        return Err(NetError::Parse(format!("bad model meta '{meta}'")).into());
    }
    let kind = ModelKind::parse(fields[1])?;
    let latent_dim: usize = fields[3]
        .parse()
        .map_err(|_| NetError::Parse("bad latent dim".into()))?;
    let rot_line = lines
        .next()
        .ok_or_else(|| NetError::Parse("missing rotation line".into()))?
        .map_err(NetError::Io)?;
    let rotation = {
        let mut parts = rot_line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("rotation"), Some("none")) => None,
            (Some("rotation"), Some(dim_str)) => {
                let dim: usize = dim_str
                    .parse()
                    .map_err(|_| NetError::Parse("bad rotation dim".into()))?;
                let vals: std::result::Result<Vec<f64>, _> =
                    parts.map(|p| p.parse::<f64>()).collect();
                let vals = vals.map_err(|_| NetError::Parse("bad rotation entries".into()))?;
                Some(
                    Matrix::from_vec(dim, dim, vals)
                        .map_err(|e| NetError::Parse(e.to_string()))?,
                )
            }
            _ => return Err(NetError::Parse(format!("bad rotation line '{rot_line}'")).into()),
        }
    };
    let encoder = MlpNetwork::read_checkpoint(&mut lines)?;
    let decoder = MlpNetwork::read_checkpoint(&mut lines)?;
    let mut model = AutoencoderModel::new(kind, latent_dim, encoder, decoder)?;
    model.latent_rotation = rotation;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, OptimizerKind};
    use crate::rng::{seeded_rng, standard_normal};

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
    }

    #[test]
    fn kl_diagonal_known_values() {
        let prior = GaussianPosterior::diag(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(kl_diagonal(&prior).unwrap(), 0.0);

        let shifted = GaussianPosterior::diag(vec![1.0], vec![0.0]);
        assert_close(kl_diagonal(&shifted).unwrap(), 0.5, 1e-15, "mu=1");

        let wide = GaussianPosterior::diag(vec![0.0], vec![1.0]);
        assert_close(
            kl_diagonal(&wide).unwrap(),
            (std::f64::consts::E - 2.0) / 2.0,
            1e-15,
            "sigma2=e",
        );
    }

    #[test]
    fn kl_full_matches_diagonal_and_is_rotation_invariant() {
        let identity = GaussianPosterior::full(vec![0.0; 3], Matrix::identity(3)).unwrap();
        assert_close(kl_full(&identity).unwrap(), 0.0, 1e-15, "prior");

        let lv = vec![0.3, -1.2];
        let diag_post = GaussianPosterior::diag(vec![0.4, -0.7], lv.clone());
        let l = Matrix::diag(&lv.iter().map(|v| (0.5 * v).exp()).collect::<Vec<_>>());
        let full_post = GaussianPosterior::full(vec![0.4, -0.7], l).unwrap();
        assert_close(
            kl_full(&full_post).unwrap(),
            kl_diagonal(&diag_post).unwrap(),
            1e-12,
            "diag consistency",
        );

        // Sigma = R diag(s) R^T has the same trace and log det as diag(s)
        let spectrum = [2.5, 0.4, 0.9];
        let r = linalg::random_orthogonal(3, 3);
        let sigma = r.matmul(&Matrix::diag(&spectrum)).matmul_bt(&r);
        let l_rot = linalg::cholesky_factor(&sigma).unwrap();
        let rotated = GaussianPosterior::full(vec![0.0; 3], l_rot).unwrap();
        let l_axis = Matrix::diag(&spectrum.iter().map(|s| s.sqrt()).collect::<Vec<_>>());
        let axis = GaussianPosterior::full(vec![0.0; 3], l_axis).unwrap();
        assert_close(
            kl_full(&rotated).unwrap(),
            kl_full(&axis).unwrap(),
            1e-10,
            "spectrum invariance",
        );
    }

    #[test]
    fn kl_approx_cases() {
        let post = GaussianPosterior::diag(vec![2.0, 0.0], vec![(0.01_f64).ln(), 0.0]);
        assert_eq!(kl_approx_polarized(&post, &[]).unwrap(), 0.0);
        let got = kl_approx_polarized(&post, &[0]).unwrap();
        assert_close(got, 0.5 * (4.0 - (0.01_f64).ln() - 1.0), 1e-12, "active {{0}}");

        // fully active, tiny variances: approx converges to exact KL
        let tiny = GaussianPosterior::diag(vec![0.8, -0.5], vec![-14.0, -15.0]);
        let exact = kl_diagonal(&tiny).unwrap();
        let approx = kl_approx_polarized(&tiny, &[0, 1]).unwrap();
        assert!((exact - approx).abs() / exact < 1e-6);
    }

    fn build_model(kind: ModelKind, n: usize, d: usize, seed: u64) -> AutoencoderModel {
        let mut rng = seeded_rng(seed, 0);
        let enc = MlpNetwork::init(n, &[], kind.encoder_output_dim(d), Activation::Linear, &mut rng);
        let dec = MlpNetwork::init(d, &[], n, Activation::Linear, &mut rng);
        AutoencoderModel::new(kind, d, enc, dec).unwrap()
    }

    fn build_deep_model(kind: ModelKind, n: usize, d: usize, seed: u64) -> AutoencoderModel {
        let mut rng = seeded_rng(seed, 0);
        let enc = MlpNetwork::init(n, &[6], kind.encoder_output_dim(d), Activation::Tanh, &mut rng);
        let dec = MlpNetwork::init(d, &[6], n, Activation::Tanh, &mut rng);
        AutoencoderModel::new(kind, d, enc, dec).unwrap()
    }

    #[test]
    fn reconstruction_losses_identity_decoder_zero_at_mean() {
        // encoder mean head = identity, logvar head very negative (sigma ~ 0)
        let enc = MlpNetwork::from_layers(vec![crate::nets::Layer {
            weight: Matrix::from_rows(&[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.0, 0.0],
                vec![0.0, 0.0],
            ])
            .unwrap(),
            bias: vec![0.0, 0.0, -60.0, -60.0],
            activation: Activation::Linear,
        }])
        .unwrap();
        let dec = MlpNetwork::from_layers(vec![crate::nets::Layer {
            weight: Matrix::identity(2),
            bias: vec![0.0, 0.0],
            activation: Activation::Linear,
        }])
        .unwrap();
        let model = AutoencoderModel::new(ModelKind::BetaVae, 2, enc, dec).unwrap();
        let mut rng = seeded_rng(1, 0);
        let b = reconstruction_losses(&model, &[0.3, -0.9], 1.0, &mut rng).unwrap();
        assert!(b.rec_deterministic < 1e-20);
        // sigma -> 0: stochastic part vanishes, total -> deterministic
        assert!(b.rec_stochastic < 1e-20);
        assert!((b.rec_total - b.rec_deterministic).abs() < 1e-20);
    }

    #[test]
    fn stochastic_loss_matches_column_norm_formula_monte_carlo() {
        // linear decoder M1, fixed diagonal sigma: E ||M eps||^2 = sum ||c_j||^2 s2_j
        let m1 = Matrix::from_rows(&[vec![4.0, 1.0], vec![-3.0, 1.0], vec![5.0, -1.0]]).unwrap();
        let s2 = [0.07_f64, 0.4];
        let expect = 50.0 * s2[0] + 3.0 * s2[1];
        let mut rng = seeded_rng(42, 0);
        let samples = 100_000;
        let mut acc = 0.0;
        for _ in 0..samples {
            let eps = [
                standard_normal(&mut rng) * s2[0].sqrt(),
                standard_normal(&mut rng) * s2[1].sqrt(),
            ];
            let y = m1.matvec(&eps);
            acc += y.iter().map(|v| v * v).sum::<f64>();
        }
        let mc = acc / samples as f64;
        assert!((mc - expect).abs() / expect < 0.02, "MC {mc} vs {expect}");
    }

    #[test]
    fn loss_decomposition_unbiased_for_linear_decoder() {
        // Prop-4-style split: mean of rec_total over many draws equals
        // rec_det + mean rec_stoch for a linear decoder.
        let model = build_model(ModelKind::BetaVae, 3, 2, 9);
        let x = [0.4, -0.2, 0.8];
        let mut rng = seeded_rng(77, 0);
        let mut total = 0.0;
        let mut stoch = 0.0;
        let mut det = 0.0;
        let samples = 100_000;
        for _ in 0..samples {
            let b = reconstruction_losses(&model, &x, 1.0, &mut rng).unwrap();
            total += b.rec_total;
            stoch += b.rec_stochastic;
            det = b.rec_deterministic;
        }
        total /= samples as f64;
        stoch /= samples as f64;
        assert!(
            (total - (det + stoch)).abs() / total < 0.01,
            "decomposition off: {total} vs {} + {stoch}",
            det
        );
    }

    /// Finite-difference check of `batch_gradients` with frozen noise.
    fn check_model_gradients(kind: ModelKind, beta: f64, seed: u64) {
        let model = build_deep_model(kind, 3, 2, seed);
        let mut rng = seeded_rng(seed, 1);
        let batch = Matrix::from_fn(4, 3, |_, _| standard_normal(&mut rng));

        let noise_seed = seed + 1000;
        let mut g_rng = seeded_rng(noise_seed, 2);
        let grads = batch_gradients(&model, &batch, beta, &mut g_rng).unwrap();

        let loss_at = |m: &AutoencoderModel| -> f64 {
            let mut r = seeded_rng(noise_seed, 2);
            let g = batch_gradients(m, &batch, beta, &mut r).unwrap();
            g.breakdown.total()
        };

        let h = 1e-6;
        for (net_idx, flat_grads) in [(0usize, &grads.encoder), (1usize, &grads.decoder)] {
            let mut theta = Vec::new();
            match net_idx {
                0 => model.encoder.flatten_params_into(&mut theta),
                _ => model.decoder.flatten_params_into(&mut theta),
            }
            let mut worst = 0.0_f64;
            for i in 0..theta.len() {
                let mut probe = model.clone();
                let mut t = theta.clone();
                t[i] += h;
                match net_idx {
                    0 => probe.encoder.set_params_from(&t).unwrap(),
                    _ => probe.decoder.set_params_from(&t).unwrap(),
                }
                let up = loss_at(&probe);
                t[i] -= 2.0 * h;
                match net_idx {
                    0 => probe.encoder.set_params_from(&t).unwrap(),
                    _ => probe.decoder.set_params_from(&t).unwrap(),
                }
                let down = loss_at(&probe);
                let fd = (up - down) / (2.0 * h);
                let an = flat_grads[i];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1.0));
            }
            assert!(worst <= 1e-4, "{kind:?} net {net_idx} worst grad err {worst}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_diag() {
        check_model_gradients(ModelKind::BetaVae, 0.37, 5);
    }

    #[test]
    fn gradients_match_finite_differences_full() {
        check_model_gradients(ModelKind::BetaVaeFull, 0.61, 6);
    }

    #[test]
    fn gradients_match_finite_differences_ae() {
        check_model_gradients(ModelKind::Ae, 0.0, 7);
    }

    #[test]
    fn beta_zero_matches_pure_reconstruction_bitwise() {
        let model = build_deep_model(ModelKind::BetaVae, 3, 2, 21);
        let mut rng = seeded_rng(3, 0);
        let batch = Matrix::from_fn(5, 3, |_, _| standard_normal(&mut rng));

        let mut r1 = seeded_rng(99, 2);
        let with_beta_zero = batch_gradients(&model, &batch, 0.0, &mut r1).unwrap();
        let mut r2 = seeded_rng(99, 2);
        let reference = batch_gradients(&model, &batch, 0.0, &mut r2).unwrap();
        // decoder gradients with beta = 0 are untouched by any KL term
        assert!(with_beta_zero
            .decoder
            .iter()
            .zip(&reference.decoder)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        // and differ from beta > 0 encoder gradients
        let mut r3 = seeded_rng(99, 2);
        let with_beta = batch_gradients(&model, &batch, 2.0, &mut r3).unwrap();
        assert!(with_beta_zero
            .decoder
            .iter()
            .zip(&with_beta.decoder)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(with_beta_zero.encoder.iter().zip(&with_beta.encoder).any(|(a, b)| a != b));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut model = build_model(ModelKind::BetaVae, 3, 2, 11);
        let mut rng = seeded_rng(4, 0);
        let batch = Matrix::from_fn(6, 3, |_, _| standard_normal(&mut rng));
        let mut before = Vec::new();
        model.encoder.flatten_params_into(&mut before);
        model.decoder.flatten_params_into(&mut before);
        let mut enc_opt = OptimizerState::new(OptimizerKind::Adam, 0.0, model.encoder.param_count());
        let mut dec_opt = OptimizerState::new(OptimizerKind::Adam, 0.0, model.decoder.param_count());
        training_step(&mut model, &batch, 1e-4, &mut enc_opt, &mut dec_opt, &mut rng).unwrap();
        let mut after = Vec::new();
        model.encoder.flatten_params_into(&mut after);
        model.decoder.flatten_params_into(&mut after);
        assert_eq!(before, after);
    }

    #[test]
    fn plain_ae_loss_decreases_on_linear_data() {
        let mut rng = seeded_rng(8, 0);
        let map = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.3, 1.2], vec![0.7, 0.7]]).unwrap();
        let data = Matrix::from_fn(256, 3, |i, j| {
            let w = [((i * 37) % 97) as f64 / 97.0, ((i * 61) % 89) as f64 / 89.0];
            map.row(j)[0] * w[0] + map.row(j)[1] * w[1]
        });
        let mut model = build_model(ModelKind::Ae, 3, 2, 12);
        let mut enc_opt = OptimizerState::new(OptimizerKind::Adam, 1e-2, model.encoder.param_count());
        let mut dec_opt = OptimizerState::new(OptimizerKind::Adam, 1e-2, model.decoder.param_count());
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..100 {
            let b = training_step(&mut model, &data, 0.0, &mut enc_opt, &mut dec_opt, &mut rng).unwrap();
            first.get_or_insert(b.rec_total);
            last = b.rec_total;
        }
        assert!(last < 0.2 * first.unwrap(), "no progress: {first:?} -> {last}");
    }

    #[test]
    fn latent_rotation_identity_is_noop() {
        let model = build_model(ModelKind::BetaVaeFull, 3, 2, 31);
        let rotated = apply_latent_rotation(&model, &Matrix::identity(2)).unwrap();
        let x = [0.5, -0.1, 0.9];
        let p0 = model.encode_posterior(&x).unwrap();
        let p1 = rotated.encode_posterior(&x).unwrap();
        for (a, b) in p0.mean.iter().zip(&p1.mean) {
            assert_close(*a, *b, 1e-12, "mean");
        }
        let (PosteriorScale::FullFactor(l0), PosteriorScale::FullFactor(l1)) =
            (&p0.scale, &p1.scale)
        else {
            panic!("expected full factors")
        };
        assert!(l0.sub(l1).max_abs() <= 1e-10);
    }

    #[test]
    fn latent_rotation_rejects_diagonal_models() {
        let model = build_model(ModelKind::BetaVae, 3, 2, 32);
        let q = linalg::rotation_2d(0.5);
        assert!(matches!(
            apply_latent_rotation(&model, &q),
            Err(ModelError::DiagonalNotRotatable)
        ));
    }

    #[test]
    fn full_covariance_loss_invariant_under_rotation() {
        let model = build_deep_model(ModelKind::BetaVaeFull, 4, 3, 33);
        let mut rng = seeded_rng(101, 0);
        for trial in 0..5u64 {
            let q = linalg::random_orthogonal(3, 500 + trial);
            let rotated = apply_latent_rotation(&model, &q).unwrap();
            let x: Vec<f64> = (0..4).map(|_| standard_normal(&mut rng)).collect();
            let eps: Vec<f64> = (0..3).map(|_| standard_normal(&mut rng)).collect();
            let (a, b) = rotated_loss_pair(&model, &rotated, &q, &x, 1.3, &eps).unwrap();
            assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "loss {a} vs {b}");
        }
    }

    #[test]
    fn diagonal_kl_changes_under_rotation_of_the_gaussian() {
        // rotate a non-isotropic diagonal Gaussian and project back onto the
        // diagonal family: the closed-form KL changes (the family is not
        // closed under rotation)
        let mu = vec![0.3, -0.2];
        let s2 = [0.01_f64, 1.0];
        let post = GaussianPosterior::diag(mu.clone(), s2.iter().map(|v| v.ln()).collect());
        let q = linalg::rotation_2d(std::f64::consts::FRAC_PI_4);
        let sigma = q.matmul(&Matrix::diag(&s2)).matmul_bt(&q);
        let rotated_diag: Vec<f64> = (0..2).map(|i| sigma.get(i, i).ln()).collect();
        let rotated_post = GaussianPosterior::diag(q.matvec(&mu), rotated_diag);
        let a = kl_diagonal(&post).unwrap();
        let b = kl_diagonal(&rotated_post).unwrap();
        assert!((a - b).abs() > 1e-3, "{a} vs {b}");
    }

    #[test]
    fn model_checkpoint_roundtrip() {
        let model = build_deep_model(ModelKind::BetaVaeFull, 3, 2, 41);
        let rotated = apply_latent_rotation(&model, &linalg::rotation_2d(0.3)).unwrap();
        for m in [&model, &rotated] {
            let mut buf = Vec::new();
            write_model(m, &mut buf).unwrap();
            let restored = read_model(std::io::BufReader::new(buf.as_slice())).unwrap();
            assert_eq!(restored.kind, m.kind);
            assert_eq!(restored.latent_dim, m.latent_dim);
            let (mut a, mut b) = (Vec::new(), Vec::new());
            m.encoder.flatten_params_into(&mut a);
            m.decoder.flatten_params_into(&mut a);
            restored.encoder.flatten_params_into(&mut b);
            restored.decoder.flatten_params_into(&mut b);
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            match (&m.latent_rotation, &restored.latent_rotation) {
                (None, None) => {}
                (Some(p), Some(r)) => assert!(p.sub(r).max_abs() == 0.0),
                _ => panic!("rotation lost in roundtrip"),
            }
        }
    }
}
