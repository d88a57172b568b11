//! The variational objective and training loop.
//!
//! ELBO values are in nats per observation and include the Gaussian
//! likelihood's normalizing constant `-(d/2) log(2πσ²)`.

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::hypernet::{modulate, modulate_graph, HypernetParams, HypernetVars};
use crate::models::{decoder_mean, decoder_third_graph, encode, encode_graph, make_encoder, EncoderParams, PosteriorParams, LATENT_DIM, OBS_DIM};
use crate::optim::{AdamConfig, AdamState, EarlyStopState, ParamSet, StopDecision};
use crate::synthetic::{stream_rng, SyntheticDataset};

/// Stream used for evaluation noise tables.
pub const EVAL_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;
const TRAIN_NOISE_STREAM: u64 = 4;

/// Seed of the evaluation noise shared by every model, so ELBO comparisons
/// use common random numbers.
pub const DEFAULT_EVAL_SEED: u64 = 0x5EED_E7A1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub num_samples: usize,
}

/// `KL(N(μ, diag σ²) ‖ N(0, I))`.
pub fn kl_diag_gaussian(q: &PosteriorParams) -> f64 {
    0.5 * q
        .mean
        .iter()
        .zip(&q.log_variance)
        .map(|(m, lv)| m * m + lv.exp_m1() - lv)
        .sum::<f64>()
}

/// `z = μ + exp(½ log σ²) ⊙ ε`.
pub fn reparameterize(q: &PosteriorParams, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != q.dim() {
        return Err(Error::Dimension {
            what: "noise draw",
            expected: q.dim(),
            got: eps.len(),
        });
    }
    Ok(q
        .mean
        .iter()
        .zip(&q.log_variance)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// `-(d/2) log(2πσ²)`, the part of the Gaussian log-likelihood that does not
/// depend on the residual.
pub fn loglik_constant(sigma: f64, dim: usize) -> f64 {
    -0.5 * dim as f64 * (2.0 * PI * sigma * sigma).ln()
}

/// `Σ_i [-½ log(2πσ²) - (x_i - m_i)² / (2σ²)]`.
pub fn gaussian_loglik(x: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("noise std must be positive, got {sigma}")));
    }
    if x.len() != mean.len() {
        return Err(Error::Dimension {
            what: "decoder mean",
            expected: x.len(),
            got: mean.len(),
        });
    }
    let sse: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(loglik_constant(sigma, x.len()) - sse / (2.0 * sigma * sigma))
}

/// Monte Carlo ELBO of a given posterior; one reconstruction sample per row
/// of `noise`.
pub fn elbo_for_posterior(x: &[f64; 3], q: &PosteriorParams, noise: &[[f64; 2]], sigma: f64) -> Result<ElboEstimate> {
    if noise.is_empty() {
        return Err(Error::invalid("at least one Monte Carlo sample is required"));
    }
    if q.dim() != LATENT_DIM {
        return Err(Error::Dimension {
            what: "posterior",
            expected: LATENT_DIM,
            got: q.dim(),
        });
    }
    let std = [(0.5 * q.log_variance[0]).exp(), (0.5 * q.log_variance[1]).exp()];
    let mut total = 0.0;
    for eps in noise {
        let z = [q.mean[0] + std[0] * eps[0], q.mean[1] + std[1] * eps[1]];
        total += gaussian_loglik(x, &decoder_mean(z), sigma)?;
    }
    let reconstruction = total / noise.len() as f64;
    let kl = kl_diag_gaussian(q);
    Ok(ElboEstimate {
        elbo: reconstruction - kl,
        reconstruction,
        kl,
        num_samples: noise.len(),
    })
}

/// Exact ELBO for the oracle decoder. The reconstruction term is a
/// polynomial of degree at most two in each latent coordinate, so the
/// three-point Gauss–Hermite rule (exact to degree five) integrates it
/// without error. `num_samples` reports the 9 quadrature nodes.
pub fn elbo_exact(x: &[f64; 3], q: &PosteriorParams, sigma: f64) -> Result<ElboEstimate> {
    if q.dim() != LATENT_DIM {
        return Err(Error::Dimension {
            what: "posterior",
            expected: LATENT_DIM,
            got: q.dim(),
        });
    }
    let s3 = 3f64.sqrt();
    let rule = [(-s3, 1.0 / 6.0), (0.0, 2.0 / 3.0), (s3, 1.0 / 6.0)];
    let std = [(0.5 * q.log_variance[0]).exp(), (0.5 * q.log_variance[1]).exp()];
    let mut reconstruction = 0.0;
    for (u, wu) in rule {
        for (v, wv) in rule {
            let z = [q.mean[0] + std[0] * u, q.mean[1] + std[1] * v];
            reconstruction += wu * wv * gaussian_loglik(x, &decoder_mean(z), sigma)?;
        }
    }
    let kl = kl_diag_gaussian(q);
    Ok(ElboEstimate {
        elbo: reconstruction - kl,
        reconstruction,
        kl,
        num_samples: rule.len() * rule.len(),
    })
}

/// ELBO of `x` under the encoder `params`.
pub fn elbo_estimate(x: &[f64; 3], params: &EncoderParams, noise: &[[f64; 2]], sigma: f64) -> Result<ElboEstimate> {
    elbo_for_posterior(x, &encode(x, params)?, noise, sigma)
}

/// Graph version of [`kl_diag_gaussian`].
pub fn kl_graph(g: &mut Graph, mean: Var, log_var: Var) -> Result<Var> {
    let k = g.value(mean).len() as f64;
    let m2 = g.square(mean);
    let a = g.sum(m2);
    let e = g.exp(log_var);
    let b = g.sum(e);
    let c = g.sum(log_var);
    let ab = g.add(a, b)?;
    let abc = g.sub(ab, c)?;
    let kk = g.constant(Tensor::scalar(k));
    let total = g.sub(abc, kk)?;
    Ok(g.scale(total, 0.5))
}

/// Graph ELBO for one observation. All `noise` rows are processed as
/// length-S vectors. Returns `(elbo, reconstruction, kl)` nodes.
pub fn elbo_graph(g: &mut Graph, x: &[f64; 3], mean: Var, log_var: Var, noise: &[[f64; 2]], sigma: f64) -> Result<(Var, Var, Var)> {
    let s = noise.len();
    if s == 0 {
        return Err(Error::invalid("at least one Monte Carlo sample is required"));
    }
    let mut z = Vec::with_capacity(2);
    for k in 0..LATENT_DIM {
        let m = g.slice(mean, k, 1)?;
        let lv = g.slice(log_var, k, 1)?;
        let half = g.scale(lv, 0.5);
        let sd = g.exp(half);
        let (m, sd) = if s == 1 { (m, sd) } else { (g.expand(m, s)?, g.expand(sd, s)?) };
        let eps = g.constant(Tensor::vector(noise.iter().map(|e| e[k]).collect()));
        let scaled = g.mul(sd, eps)?;
        z.push(g.add(m, scaled)?);
    }
    let third = decoder_third_graph(g, z[0], z[1])?;
    let preds = [z[0], z[1], third];
    let mut sq_sums = Vec::with_capacity(OBS_DIM);
    for (i, p) in preds.into_iter().enumerate() {
        let xi = g.constant(Tensor::vector(vec![x[i]; s]));
        let r = g.sub(xi, p)?;
        let r2 = g.square(r);
        sq_sums.push(g.sum(r2));
    }
    let sse = g.concat(&sq_sums)?;
    let sse = g.sum(sse);
    let scaled = g.scale(sse, -1.0 / (2.0 * sigma * sigma * s as f64));
    let c = g.constant(Tensor::scalar(loglik_constant(sigma, OBS_DIM)));
    let recon = g.add(scaled, c)?;
    let kl = kl_graph(g, mean, log_var)?;
    let elbo = g.sub(recon, kl)?;
    Ok((elbo, recon, kl))
}

/// Fixed per-point noise draws, `s` rows per observation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseTable {
    pub samples: usize,
    draws: Vec<[f64; 2]>,
}

impl NoiseTable {
    pub fn new(points: usize, samples: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, EVAL_STREAM);
        let draws = (0..points * samples)
            .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect();
        NoiseTable { samples, draws }
    }

    pub fn points(&self) -> usize {
        self.draws.len() / self.samples.max(1)
    }

    pub fn row(&self, i: usize) -> &[[f64; 2]] {
        &self.draws[i * self.samples..(i + 1) * self.samples]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Vae,
    IaVae,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Vae => "vae",
            Mode::IaVae => "ia-vae",
        })
    }
}

/// A trained (or initial) inference model.
#[derive(Clone, Debug, PartialEq)]
pub enum InferenceModel {
    Vae(EncoderParams),
    IaVae {
        base: EncoderParams,
        hypernet: HypernetParams,
    },
}

impl InferenceModel {
    pub fn mode(&self) -> Mode {
        match self {
            InferenceModel::Vae(_) => Mode::Vae,
            InferenceModel::IaVae { .. } => Mode::IaVae,
        }
    }

    pub fn base(&self) -> &EncoderParams {
        match self {
            InferenceModel::Vae(e) => e,
            InferenceModel::IaVae { base, .. } => base,
        }
    }

    pub fn posterior(&self, x: &[f64; 3]) -> Result<PosteriorParams> {
        match self {
            InferenceModel::Vae(enc) => encode(x, enc),
            InferenceModel::IaVae { base, hypernet } => encode(x, &modulate(base, x, hypernet)?),
        }
    }

    /// Encoder parameters excluding embeddings, plus hypernetwork heads.
    pub fn inference_parameter_count(&self) -> usize {
        match self {
            InferenceModel::Vae(enc) => enc.parameter_count(),
            InferenceModel::IaVae { base, hypernet } => base.parameter_count() + hypernet.hypernet_parameter_count(),
        }
    }

    pub fn embedding_parameter_count(&self) -> usize {
        match self {
            InferenceModel::Vae(_) => 0,
            InferenceModel::IaVae { hypernet, .. } => hypernet.embedding_parameter_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Only used when `train_decoder` is set.
    pub decoder_learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Monte Carlo samples per observation in the training objective.
    pub num_mc_samples: usize,
    /// Monte Carlo samples per observation for the monitored ELBO.
    pub eval_samples: usize,
    pub eval_seed: u64,
    pub seed: u64,
    pub hypernet_init_std: f64,
    pub hidden_width: usize,
    pub embed_dim: usize,
    pub train_decoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            decoder_learning_rate: 5e-5,
            batch_size: 32,
            max_epochs: 1000,
            patience: 100,
            num_mc_samples: 1,
            eval_samples: 64,
            eval_seed: DEFAULT_EVAL_SEED,
            seed: 0,
            hypernet_init_std: 1e-3,
            hidden_width: 2,
            embed_dim: 2,
            train_decoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("decoder_learning_rate", self.decoder_learning_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("num_mc_samples", self.num_mc_samples),
            ("eval_samples", self.eval_samples),
            ("hidden_width", self.hidden_width),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.max_epochs > 0 && self.patience > self.max_epochs {
            return Err(Error::invalid(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.hypernet_init_std >= 0.0 && self.hypernet_init_std.is_finite()) {
            return Err(Error::invalid("hypernet_init_std must be finite and >= 0"));
        }
        if self.train_decoder {
            return Err(Error::invalid(
                "the oracle decoder has no trainable parameters; train_decoder must be off",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-ELBO snapshot.
    pub model: InferenceModel,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best: ElboEstimate,
    pub stopped_early: bool,
}

/// Dataset-mean ELBO of `model` with fixed per-point noise.
pub fn evaluate(model: &InferenceModel, data: &SyntheticDataset, noise: &NoiseTable) -> Result<ElboEstimate> {
    let per = per_point_elbo(model, data, noise)?;
    let n = per.len() as f64;
    let (mut e, mut r, mut k) = (0.0, 0.0, 0.0);
    for p in &per {
        e += p.elbo;
        r += p.reconstruction;
        k += p.kl;
    }
    Ok(ElboEstimate {
        elbo: e / n,
        reconstruction: r / n,
        kl: k / n,
        num_samples: noise.samples,
    })
}

pub fn per_point_elbo(model: &InferenceModel, data: &SyntheticDataset, noise: &NoiseTable) -> Result<Vec<ElboEstimate>> {
    if noise.points() < data.len() {
        return Err(Error::invalid(format!(
            "noise table covers {} points, dataset has {}",
            noise.points(),
            data.len()
        )));
    }
    data.x
        .iter()
        .enumerate()
        .map(|(i, x)| elbo_for_posterior(x, &model.posterior(x)?, noise.row(i), data.sigma))
        .collect()
}

enum Trainee {
    Vae(EncoderParams),
    IaVae(HypernetParams),
}

/// Trains the encoder (VAE mode) or the hypernetwork and block embeddings
/// on top of a frozen base encoder (IA-VAE mode) by maximizing the mean
/// ELBO with Adam. Early stopping monitors the full-dataset ELBO; the
/// best snapshot is returned.
pub fn train(data: &SyntheticDataset, mode: Mode, base: Option<&EncoderParams>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut trainee = match mode {
        Mode::Vae => Trainee::Vae(match base {
            Some(b) => b.clone(),
            None => make_encoder(cfg.hidden_width, cfg.seed)?,
        }),
        Mode::IaVae => {
            let b = base.ok_or_else(|| Error::invalid("IA-VAE training requires a trained base encoder"))?;
            Trainee::IaVae(HypernetParams::linear(b, cfg.embed_dim, cfg.hypernet_init_std, cfg.seed)?)
        }
    };
    let frozen = base.cloned();
    let as_model = |t: &Trainee| match t {
        Trainee::Vae(e) => InferenceModel::Vae(e.clone()),
        Trainee::IaVae(h) => InferenceModel::IaVae {
            base: frozen.clone().expect("checked above"),
            hypernet: h.clone(),
        },
    };

    let noise = NoiseTable::new(data.len(), cfg.eval_samples, cfg.eval_seed);
    let start = Instant::now();
    let mut history = Vec::new();
    let mut stopper = EarlyStopState::new(cfg.patience);

    let initial = as_model(&trainee);
    let est = evaluate(&initial, data, &noise)?;
    history.push(EpochMetrics {
        epoch: 0,
        elbo: est.elbo,
        recon: est.reconstruction,
        kl: est.kl,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    });
    stopper.update(0, est.elbo, || (initial, est));

    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);
    let mut adam = match &trainee {
        Trainee::Vae(e) => AdamState::new(adam_cfg, e),
        Trainee::IaVae(h) => AdamState::new(adam_cfg, h),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = stream_rng(cfg.seed, SHUFFLE_STREAM);
    let mut noise_rng = stream_rng(cfg.seed, TRAIN_NOISE_STREAM);
    let mut stopped_early = false;
    let mut eps = vec![[0.0; 2]; cfg.num_mc_samples];

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let mut per_example = Vec::with_capacity(batch.len());
            let leaves: Vec<Var> = match &trainee {
                Trainee::Vae(enc) => {
                    let blocks: Vec<Var> = enc.blocks.iter().map(|b| g.param(b.values.clone())).collect();
                    for &i in batch {
                        let x = &data.x[i];
                        let xv = g.constant(Tensor::vector(x.to_vec()));
                        let (m, lv) = encode_graph(&mut g, xv, &blocks, &enc.architecture)?;
                        fill_noise(&mut eps, &mut noise_rng);
                        per_example.push(elbo_graph(&mut g, x, m, lv, &eps, data.sigma)?.0);
                    }
                    blocks
                }
                Trainee::IaVae(psi) => {
                    let b = frozen.as_ref().expect("checked above");
                    let hv = HypernetVars::register(&mut g, psi);
                    for &i in batch {
                        let x = &data.x[i];
                        let xv = g.constant(Tensor::vector(x.to_vec()));
                        let blocks = modulate_graph(&mut g, b, xv, psi, &hv)?;
                        let (m, lv) = encode_graph(&mut g, xv, &blocks, &b.architecture)?;
                        fill_noise(&mut eps, &mut noise_rng);
                        per_example.push(elbo_graph(&mut g, x, m, lv, &eps, data.sigma)?.0);
                    }
                    hv.leaves()
                }
            };
            let stacked = g.concat(&per_example)?;
            let total = g.sum(stacked);
            let loss = g.scale(total, -1.0 / batch.len() as f64);
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor> = leaves.iter().map(|&l| grads.wrt(l)).collect();
            match &mut trainee {
                Trainee::Vae(e) => adam.step(e, &grads, epoch)?,
                Trainee::IaVae(h) => adam.step(h, &grads, epoch)?,
            }
        }

        let model = as_model(&trainee);
        let est = evaluate(&model, data, &noise)?;
        history.push(EpochMetrics {
            epoch,
            elbo: est.elbo,
            recon: est.reconstruction,
            kl: est.kl,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if stopper.update(epoch, est.elbo, || (model, est)) == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }

    let best_epoch = stopper.best_epoch;
    let (model, best) = stopper.into_best().expect("epoch 0 always records a snapshot");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best,
        stopped_early,
    })
}

fn fill_noise(eps: &mut [[f64; 2]], rng: &mut impl rand::Rng) {
    for e in eps {
        *e = [StandardNormal.sample(rng), StandardNormal.sample(rng)];
    }
}

struct Lambda {
    mean: Tensor,
    log_var: Tensor,
}

impl ParamSet for Lambda {
    fn leaves(&self) -> Vec<(String, &Tensor)> {
        vec![("mean".into(), &self.mean), ("log_variance".into(), &self.log_var)]
    }

    fn leaves_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.mean, &mut self.log_var]
    }
}

/// Directly optimizes the variational parameters of a single observation
/// with Adam on the fixed-draw ELBO. Returns the best iterate seen (the
/// initial point included) and its ELBO under the same draws.
pub fn per_instance_optimal_elbo(
    x: &[f64; 3],
    init: &PosteriorParams,
    steps: usize,
    lr: f64,
    noise: &[[f64; 2]],
    sigma: f64,
) -> Result<(PosteriorParams, f64)> {
    let mut lam = Lambda {
        mean: Tensor::vector(init.mean.clone()),
        log_var: Tensor::vector(init.log_variance.clone()),
    };
    let mut best = (init.clone(), elbo_for_posterior(x, init, noise, sigma)?.elbo);
    let mut adam = AdamState::new(AdamConfig::with_lr(lr), &lam);
    for step in 0..steps {
        let mut g = Graph::new();
        let m = g.param(lam.mean.clone());
        let lv = g.param(lam.log_var.clone());
        let (elbo, _, _) = elbo_graph(&mut g, x, m, lv, noise, sigma)?;
        let value = g.value(elbo).data()[0];
        if value > best.1 {
            best = (
                PosteriorParams::new(lam.mean.data().to_vec(), lam.log_var.data().to_vec())?,
                value,
            );
        }
        let loss = g.scale(elbo, -1.0);
        let grads = g.backward(loss)?;
        adam.step(&mut lam, &[grads.wrt(m), grads.wrt(lv)], step)?;
    }
    let last = PosteriorParams::new(lam.mean.data().to_vec(), lam.log_var.data().to_vec())?;
    let last_value = elbo_for_posterior(x, &last, noise, sigma)?.elbo;
    if last_value > best.1 {
        best = (last, last_value);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_grad;
    use crate::synthetic::generate;

    #[test]
    fn kl_examples() {
        let q = PosteriorParams::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(kl_diag_gaussian(&q), 0.0);
        let q = PosteriorParams::new(vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert!((kl_diag_gaussian(&q) - 0.5).abs() < 1e-15);
        let q = PosteriorParams::new(vec![0.0, 0.0], vec![4f64.ln(), 0.0]).unwrap();
        let expected = 0.5 * (4.0 - 4f64.ln() - 1.0);
        assert!((kl_diag_gaussian(&q) - expected).abs() < 1e-14);
        assert!((expected - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn reparameterize_examples() {
        let q = PosteriorParams::new(vec![0.4, -2.0], vec![1.3, -0.7]).unwrap();
        assert_eq!(reparameterize(&q, &[0.0, 0.0]).unwrap(), q.mean);
        let q = PosteriorParams::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(reparameterize(&q, &[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
        assert!(reparameterize(&q, &[1.0]).is_err());
    }

    #[test]
    fn reparameterize_derivatives_by_finite_differences() {
        let eps = [0.8, -1.3];
        let lam = [0.2, -0.5, 0.3, -1.1];
        for out in 0..2 {
            let f = |p: &[f64]| {
                let q = PosteriorParams::new(p[..2].to_vec(), p[2..].to_vec()).unwrap();
                reparameterize(&q, &eps).unwrap()[out]
            };
            let fd = finite_diff_grad(f, &lam, 1e-6);
            // dz/dμ = I, dz/dlogvar = ½ exp(½ logvar) ε
            for k in 0..2 {
                let dmu = if k == out { 1.0 } else { 0.0 };
                assert!((fd[k] - dmu).abs() < 1e-8);
                let dlv = if k == out { 0.5 * (0.5 * lam[2 + k]).exp() * eps[k] } else { 0.0 };
                assert!((fd[2 + k] - dlv).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn exact_elbo_agrees_with_large_monte_carlo() {
        let x = [0.4, -0.3, 0.5];
        let q = PosteriorParams::new(vec![0.35, -0.2], vec![-3.0, -2.5]).unwrap();
        let exact = elbo_exact(&x, &q, 0.1).unwrap();
        let noise = NoiseTable::new(1, 200_000, 3);
        let mc = elbo_for_posterior(&x, &q, noise.row(0), 0.1).unwrap();
        let draws: Vec<f64> = noise
            .row(0)
            .iter()
            .map(|e| {
                let z = reparameterize(&q, e).unwrap();
                gaussian_loglik(&x, &decoder_mean([z[0], z[1]]), 0.1).unwrap()
            })
            .collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let se = (draws.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / draws.len() as f64 / draws.len() as f64).sqrt();
        assert!((exact.elbo - mc.elbo).abs() < 4.0 * se, "{} vs {} (se {se})", exact.elbo, mc.elbo);
        // a point mass reduces the quadrature to a single evaluation
        let tight = PosteriorParams::new(vec![0.35, -0.2], vec![-60.0, -60.0]).unwrap();
        let e = elbo_exact(&x, &tight, 0.1).unwrap();
        let direct = gaussian_loglik(&x, &decoder_mean([0.35, -0.2]), 0.1).unwrap();
        assert!((e.reconstruction - direct).abs() < 1e-9);
    }

    #[test]
    fn loglik_examples() {
        let x = [0.3, -1.0, 2.0];
        let v = gaussian_loglik(&x, &x, 0.1).unwrap();
        assert!((v - 3.0 * (-0.5 * (2.0 * PI * 0.01).ln())).abs() < 1e-12);
        // 3 · (ln 10 − ½ ln 2π)
        assert!((v - 4.150940).abs() < 1e-6);
        let shifted = [1.3, -1.0, 2.0];
        assert!((gaussian_loglik(&x, &shifted, 0.1).unwrap() - (v - 50.0)).abs() < 1e-9);
        let xp = [2.0, 0.3, -1.0];
        let mp = [2.0, 1.3, -1.0];
        assert_eq!(
            gaussian_loglik(&x, &shifted, 0.1).unwrap(),
            gaussian_loglik(&xp, &mp, 0.1).unwrap()
        );
        assert!(gaussian_loglik(&x, &x, 0.0).is_err());
    }

    #[test]
    fn elbo_decomposes() {
        let data = generate(20, 0.1, 1).unwrap();
        let enc = make_encoder(2, 3).unwrap();
        let noise = NoiseTable::new(20, 16, 5);
        for (i, x) in data.x.iter().enumerate() {
            let e = elbo_estimate(x, &enc, noise.row(i), 0.1).unwrap();
            assert!((e.elbo - (e.reconstruction - e.kl)).abs() < 1e-12);
            assert!(e.kl >= 0.0);
            assert_eq!(e.num_samples, 16);
        }
    }

    #[test]
    fn graph_elbo_matches_plain_and_finite_differences() {
        let x = [0.5, -0.2, 0.4];
        let noise: Vec<[f64; 2]> = NoiseTable::new(1, 5, 8).row(0).to_vec();
        let lam = [0.3, -0.1, -2.0, -1.5];
        let plain = |p: &[f64]| {
            let q = PosteriorParams::new(p[..2].to_vec(), p[2..].to_vec()).unwrap();
            elbo_for_posterior(&x, &q, &noise, 0.1).unwrap().elbo
        };
        let mut g = Graph::new();
        let m = g.param(Tensor::vector(lam[..2].to_vec()));
        let lv = g.param(Tensor::vector(lam[2..].to_vec()));
        let (e, _, _) = elbo_graph(&mut g, &x, m, lv, &noise, 0.1).unwrap();
        assert!((g.value(e).data()[0] - plain(&lam)).abs() < 1e-10);
        let grads = g.backward(e).unwrap();
        let ad: Vec<f64> = [m, lv].iter().flat_map(|&v| grads.wrt(v).into_data()).collect();
        let fd = finite_diff_grad(plain, &lam, 1e-6);
        for (a, b) in ad.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 + 1e-5 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn estimator_spread_shrinks_with_samples() {
        let x = [0.5, -0.2, 0.4];
        let q = PosteriorParams::new(vec![0.4, -0.3], vec![-1.0, -1.0]).unwrap();
        let spread = |s: usize| {
            let vals: Vec<f64> = (0..200)
                .map(|r| {
                    let t = NoiseTable::new(1, s, 1000 + r);
                    elbo_for_posterior(&x, &q, t.row(0), 0.1).unwrap().elbo
                })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
        };
        let (s1, s16, s256) = (spread(1), spread(16), spread(256));
        // 1/sqrt(S) scaling: ratios of 4 between successive settings
        assert!((s1 / s16 - 4.0).abs() < 1.2, "{s1} {s16}");
        assert!((s16 / s256 - 4.0).abs() < 1.2, "{s16} {s256}");
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let data = generate(40, 0.1, 0).unwrap();
        let cfg = TrainConfig {
            max_epochs: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&data, Mode::Vae, None, &cfg).unwrap();
        assert_eq!(out.model, InferenceModel::Vae(make_encoder(2, 3).unwrap()));
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn training_errors() {
        let data = generate(10, 0.1, 0).unwrap();
        let cfg = TrainConfig::default();
        assert!(train(&data, Mode::IaVae, None, &cfg).is_err());
        let mut empty = data.clone();
        empty.x.clear();
        empty.z_true.clear();
        assert!(train(&empty, Mode::Vae, None, &cfg).is_err());
        let bad = TrainConfig {
            patience: 10,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        assert!(train(&data, Mode::Vae, None, &bad).is_err());
        let dec = TrainConfig {
            train_decoder: true,
            ..TrainConfig::default()
        };
        assert!(train(&data, Mode::Vae, None, &dec).is_err());
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let data = generate(200, 0.1, 2).unwrap();
        let cfg = TrainConfig {
            max_epochs: 10,
            patience: 10,
            learning_rate: 1e-2,
            eval_samples: 8,
            seed: 1,
            ..TrainConfig::default()
        };
        let a = train(&data, Mode::Vae, None, &cfg).unwrap();
        let b = train(&data, Mode::Vae, None, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert!(a.best.elbo > a.history[0].elbo);
        let best_in_history = a.history.iter().map(|h| h.elbo).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best.elbo, best_in_history);
        assert_eq!(a.history[a.best_epoch].elbo, a.best.elbo);
    }

    #[test]
    fn iavae_updates_embeddings() {
        let data = generate(64, 0.1, 2).unwrap();
        let base = make_encoder(2, 0).unwrap();
        let cfg = TrainConfig {
            max_epochs: 1,
            patience: 1,
            learning_rate: 1e-2,
            eval_samples: 4,
            seed: 4,
            ..TrainConfig::default()
        };
        let init = HypernetParams::linear(&base, 2, cfg.hypernet_init_std, cfg.seed).unwrap();
        let out = train(&data, Mode::IaVae, Some(&base), &cfg).unwrap();
        let InferenceModel::IaVae { hypernet, base: b } = out.model else { panic!() };
        assert_eq!(b, base);
        if out.best_epoch == 1 {
            assert!(hypernet.block_embeddings.iter().zip(&init.block_embeddings).any(|(a, b)| a != b));
        }
    }

    #[test]
    fn per_instance_zero_steps_is_identity() {
        let q = PosteriorParams::new(vec![0.1, 0.2], vec![-1.0, -2.0]).unwrap();
        let noise = NoiseTable::new(1, 8, 0);
        let (lam, v) = per_instance_optimal_elbo(&[0.1, 0.2, 0.3], &q, 0, 0.05, noise.row(0), 0.1).unwrap();
        assert_eq!(lam, q);
        assert_eq!(v, elbo_for_posterior(&[0.1, 0.2, 0.3], &q, noise.row(0), 0.1).unwrap().elbo);
    }

    #[test]
    fn per_instance_optimization_improves() {
        let data = generate(5, 0.1, 6).unwrap();
        let noise = NoiseTable::new(5, 64, 1);
        let q0 = PosteriorParams::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        for (i, x) in data.x.iter().enumerate() {
            let start = elbo_for_posterior(x, &q0, noise.row(i), 0.1).unwrap().elbo;
            let (_, best) = per_instance_optimal_elbo(x, &q0, 400, 0.05, noise.row(i), 0.1).unwrap();
            assert!(best > start + 10.0, "{start} -> {best}");
        }
    }
}
