//! Reparameterized samplers and closed-form KL terms for the latent user
//! embeddings and the two channel families.
//!
//! All samplers are pure functions of their parameters and caller-supplied
//! noise. Noise itself comes from [`NoiseSource`], a ChaCha generator keyed by
//! `(seed, stream, epoch, user)`, so any sample can be regenerated without
//! replaying a sequential stream. That keeps parallel evaluation identical to
//! serial evaluation and lets tests freeze samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::{log_sigmoid, logit, sigmoid};

/// Clamp applied to a bandwidth before taking its logit.
pub const ALPHA_CLAMP: f64 = 1e-6;
/// Clamp applied to uniforms before the Gumbel transform.
pub const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| s.exp()).collect()
    }
}

/// `z = μ + ε ⊙ σ`.
pub fn sample_gaussian(post: &GaussianPosterior, noise: &[f64]) -> Vec<f64> {
    assert_eq!(noise.len(), post.dim(), "noise length must match latent dimension");
    post.mean
        .iter()
        .zip(&post.log_std)
        .zip(noise)
        .map(|((m, ls), e)| m + e * ls.exp())
        .collect()
}

/// Per-coordinate `KL[N(μ, σ²) ‖ N(0, 1/λ)]`.
#[inline]
pub fn kl_gaussian_coord(mean: f64, log_std: f64, precision: f64) -> f64 {
    let var = (2.0 * log_std).exp();
    0.5 * (precision * (var + mean * mean) - 1.0 - precision.ln() - 2.0 * log_std)
}

/// Derivatives of [`kl_gaussian_coord`] with respect to `(μ, log σ)`.
#[inline]
pub fn kl_gaussian_coord_grad(mean: f64, log_std: f64, precision: f64) -> (f64, f64) {
    (precision * mean, precision * (2.0 * log_std).exp() - 1.0)
}

/// `KL[N(μ, diag σ²) ‖ N(0, λ⁻¹ I)]`, summed over dimensions.
pub fn kl_gaussian_vs_prior(post: &GaussianPosterior, prior_precision: f64) -> f64 {
    assert!(prior_precision > 0.0, "prior precision must be positive");
    post.mean
        .iter()
        .zip(&post.log_std)
        .map(|(&m, &ls)| kl_gaussian_coord(m, ls, prior_precision))
        .sum()
}

/// Bernoulli channel relaxed with the binary Concrete distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardChannelPosterior {
    pub alpha: f64,
    pub temperature: f64,
}

fn clamp_alpha(alpha: f64) -> f64 {
    alpha.clamp(ALPHA_CLAMP, 1.0 - ALPHA_CLAMP)
}

/// Concrete sample from logits: `sigmoid((s + g₁ − g₂)/τ)`.
#[inline]
pub fn concrete_from_logit(logit_alpha: f64, g1: f64, g2: f64, temperature: f64) -> f64 {
    sigmoid((logit_alpha + g1 - g2) / temperature)
}

/// `d = sigmoid((logit(α) + g₁ − g₂)/τ)`.
pub fn sample_concrete(post: &HardChannelPosterior, g1: f64, g2: f64) -> f64 {
    assert!(post.temperature > 0.0, "temperature must be positive");
    concrete_from_logit(logit(clamp_alpha(post.alpha)), g1, g2, post.temperature)
}

/// `∂d/∂α` of [`sample_concrete`] at fixed noise.
pub fn sample_concrete_grad(post: &HardChannelPosterior, g1: f64, g2: f64) -> f64 {
    let a = clamp_alpha(post.alpha);
    let d = sample_concrete(post, g1, g2);
    d * (1.0 - d) / post.temperature / (a * (1.0 - a))
}

/// `KL[Bernoulli(α) ‖ Bernoulli(p)]` in nats.
pub fn kl_bernoulli(alpha: f64, prior_p: f64) -> f64 {
    let a = clamp_alpha(alpha);
    let p = clamp_alpha(prior_p);
    a * (a / p).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - p)).ln()
}

/// [`kl_bernoulli`] written in terms of the logit of `α`, stable for any logit.
/// Returns the value and its derivative with respect to the logit.
pub fn kl_bernoulli_from_logit(logit_alpha: f64, prior_p: f64) -> (f64, f64) {
    let a = sigmoid(logit_alpha);
    let ln_a = log_sigmoid(logit_alpha);
    let ln_1ma = log_sigmoid(-logit_alpha);
    let kl = a * (ln_a - prior_p.ln()) + (1.0 - a) * (ln_1ma - (1.0 - prior_p).ln());
    let grad = a * (1.0 - a) * (logit_alpha - logit(prior_p));
    (kl, grad)
}

/// Beta channel approximated by a two-class logistic normal whose logit-space
/// standard deviation is fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftChannelPosterior {
    /// Bandwidth, the mean of the channel variable.
    pub alpha: f64,
    /// Fixed logistic-normal standard deviation σ₁.
    pub sigma: f64,
}

impl SoftChannelPosterior {
    /// `2μ₁ = logit(α)`, the mean of `logit(d)`.
    pub fn logit_mean(&self) -> f64 {
        logit(clamp_alpha(self.alpha))
    }

    /// Standard deviation of `logit(d) = 2μ₁ + σ₁(ε₁ − ε₂)`.
    pub fn logit_std(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.sigma
    }
}

/// Logistic-normal parameters `(μ₁, σ₁)` of the first class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticNormal {
    pub mu1: f64,
    pub sigma1: f64,
}

/// Maps Beta pseudo-counts `(α₁, α₂)` to the logistic-normal mean
/// `μ₁ = ½(ln α₁ − ln α₂)`; the standard deviation is pinned to `sigma`.
pub fn beta_to_logistic_normal(alpha1: f64, alpha2: f64, sigma: f64) -> LogisticNormal {
    LogisticNormal {
        mu1: 0.5 * (alpha1.ln() - alpha2.ln()),
        sigma1: sigma,
    }
}

/// Same mapping expressed through the bandwidth `α = α₁/(α₁+α₂)`.
pub fn bandwidth_to_logistic_normal(alpha: f64, sigma: f64) -> LogisticNormal {
    LogisticNormal {
        mu1: 0.5 * logit(clamp_alpha(alpha)),
        sigma1: sigma,
    }
}

/// `d = sigmoid(2μ₁ + σ₁(ε₁ − ε₂))`.
pub fn sample_logistic_normal(post: &SoftChannelPosterior, eps1: f64, eps2: f64) -> f64 {
    sigmoid(post.logit_mean() + post.sigma * (eps1 - eps2))
}

/// `KL[N(m_q, s_q²) ‖ N(m_p, s_p²)]` for univariate Gaussians.
#[inline]
pub fn kl_univariate_gaussian(m_q: f64, s_q: f64, m_p: f64, s_p: f64) -> f64 {
    (s_p / s_q).ln() + (s_q * s_q + (m_q - m_p) * (m_q - m_p)) / (2.0 * s_p * s_p) - 0.5
}

/// KL between two soft channels, computed exactly on `logit(d)`.
pub fn kl_soft_channel(post: &SoftChannelPosterior, prior: &SoftChannelPosterior) -> f64 {
    assert!(post.sigma > 0.0 && prior.sigma > 0.0, "logit std must be positive");
    kl_univariate_gaussian(
        post.logit_mean(),
        post.logit_std(),
        prior.logit_mean(),
        prior.logit_std(),
    )
}

/// Soft-channel KL against a prior of logit mean `prior_logit` and the same
/// σ, as a function of the posterior logit. Returns value and derivative.
pub fn kl_soft_channel_from_logit(logit_alpha: f64, prior_logit: f64, sigma: f64) -> (f64, f64) {
    let var = 2.0 * sigma * sigma;
    let diff = logit_alpha - prior_logit;
    (diff * diff / (2.0 * var), diff / var)
}

/// Independent noise streams drawn from one [`NoiseSource`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseStream {
    /// Gaussian noise for `z_b` and the channel noise of the b-step.
    Collaborative = 1,
    /// Gaussian noise for `z_t` in the t-step.
    Feature = 2,
    /// The fixed Bernoulli draw of the hard channel at prediction time.
    Prediction = 3,
    /// Mini-batch order.
    Shuffle = 4,
    /// Parameter initialization.
    Init = 5,
    /// Layerwise pretraining.
    Pretrain = 6,
    /// Input dropout masks.
    Dropout = 7,
}

/// Counter-based noise: every `(stream, epoch, user)` triple owns its own
/// ChaCha key, independent of evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseSource {
    seed: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, stream: NoiseStream, epoch: u64, user: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
        key[16..24].copy_from_slice(&epoch.to_le_bytes());
        key[24..].copy_from_slice(&user.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Gumbel(0, 1) via `−ln(−ln U)`, with `U` kept away from {0, 1}.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

/// Exponential temperature schedule from `start` to `end` over `epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.1,
        }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.start;
        }
        let frac = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
        self.start * (self.end / self.start).powf(frac)
    }
}
