use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stochastic::TemperatureSchedule;
use crate::tensor::AdamConfig;

/// How feature information reaches the fused user embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelKind {
    /// Bernoulli gate relaxed with the Concrete distribution.
    Hard,
    /// Beta gate approximated by a logistic normal.
    Soft,
    /// `d ≡ 0`: features are ignored.
    Stop,
    /// `d ≡ 1`: features always pass.
    Pass,
    /// Ratings and features concatenated into one Gaussian tower.
    ConcatBaseline,
    /// Ratings only, L2-normalized at the input.
    CollabOnly,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 6] = [
        ChannelKind::Hard,
        ChannelKind::Soft,
        ChannelKind::Stop,
        ChannelKind::Pass,
        ChannelKind::ConcatBaseline,
        ChannelKind::CollabOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::Hard => "hard",
            ChannelKind::Soft => "soft",
            ChannelKind::Stop => "stop",
            ChannelKind::Pass => "pass",
            ChannelKind::ConcatBaseline => "concat-baseline",
            ChannelKind::CollabOnly => "collab-only",
        }
    }

    /// Variants with a separate feature tower fused through `v = z_b + d·z_t`.
    pub fn is_fused(self) -> bool {
        matches!(
            self,
            ChannelKind::Hard | ChannelKind::Soft | ChannelKind::Stop | ChannelKind::Pass
        )
    }

    /// Variants whose feature tower is trained by a t-step.
    pub fn trains_feature_tower(self) -> bool {
        matches!(self, ChannelKind::Hard | ChannelKind::Soft | ChannelKind::Pass)
    }

    /// Variants with a learned, user-dependent bandwidth.
    pub fn has_bandwidth(self) -> bool {
        matches!(self, ChannelKind::Hard | ChannelKind::Soft)
    }

    /// Constant channel value of the deterministic variants.
    pub fn fixed_channel(self) -> Option<f64> {
        match self {
            ChannelKind::Stop => Some(0.0),
            ChannelKind::Pass => Some(1.0),
            _ => None,
        }
    }

    /// Variants whose first layer reads L2-normalized ratings directly.
    pub fn normalizes_input(self) -> bool {
        matches!(self, ChannelKind::ConcatBaseline | ChannelKind::CollabOnly)
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ChannelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown channel kind `{s}` (expected one of hard, soft, stop, pass, concat-baseline, collab-only)"
                ))
            })
    }
}

/// Likelihood of the user features given `z_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FeatureLikelihood {
    /// Cross-entropy against features in `[0, 1]` used as soft targets.
    Bernoulli,
    /// `N(Gen_t(z_t), precision⁻¹ I)` on real-valued features.
    Gaussian { precision: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VbaeConfig {
    pub channel: ChannelKind,
    /// Widths of the collaborative inference network. The first entry is the
    /// hidden rating embedding `h_b`; later entries are sigmoid layers applied
    /// to its direction.
    pub collab_hidden: Vec<usize>,
    /// Sigmoid hidden layers of the rating generation network.
    pub decoder_hidden: Vec<usize>,
    /// Sigmoid hidden layers of the feature inference network; the generation
    /// network mirrors them with tied weights.
    pub feature_hidden: Vec<usize>,
    /// Latent dimension `K` shared by `z_b` and `z_t`.
    pub latent_dim: usize,
    pub beta_max: f64,
    /// Optimizer steps over which β rises linearly to `beta_max`; `None`
    /// means half of all b-step updates.
    pub beta_anneal_steps: Option<u64>,
    pub temperature: TemperatureSchedule,
    /// Fixed logistic-normal σ of the soft channel.
    pub soft_sigma: f64,
    /// Prior mean of the channel variable.
    pub channel_prior: f64,
    /// Weight decay of all dense layers.
    pub lambda_w: f64,
    /// Multiplier on `lambda_w` for the bandwidth head.
    pub bandwidth_decay_factor: f64,
    /// Prior precision of `z_b`.
    pub lambda_b: f64,
    /// Prior precision of `z_t`.
    pub lambda_t: f64,
    pub feature_likelihood: FeatureLikelihood,
    /// Probability of dropping each training input item.
    pub input_dropout: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    /// Re-estimate the batch-norm running statistics on all training users
    /// after every b-step epoch.
    pub recalibrate_bn: bool,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for VbaeConfig {
    fn default() -> Self {
        Self {
            channel: ChannelKind::Soft,
            collab_hidden: vec![100],
            decoder_hidden: Vec::new(),
            feature_hidden: vec![100],
            latent_dim: 32,
            beta_max: 0.2,
            beta_anneal_steps: None,
            temperature: TemperatureSchedule::default(),
            soft_sigma: 0.1,
            channel_prior: 0.5,
            lambda_w: 1e-4,
            bandwidth_decay_factor: 10.0,
            lambda_b: 1.0,
            lambda_t: 1.0,
            feature_likelihood: FeatureLikelihood::Bernoulli,
            input_dropout: 0.0,
            bn_momentum: 0.99,
            bn_epsilon: 1e-5,
            recalibrate_bn: true,
            epochs: 30,
            pretrain_epochs: 10,
            batch_size: 500,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

fn check(ok: bool, field: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{field}: {message}")))
    }
}

impl VbaeConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.latent_dim > 0, "latent_dim", "must be positive")?;
        check(!self.collab_hidden.is_empty(), "collab_hidden", "needs the embedding width")?;
        for (field, widths) in [
            ("collab_hidden", &self.collab_hidden),
            ("decoder_hidden", &self.decoder_hidden),
            ("feature_hidden", &self.feature_hidden),
        ] {
            check(widths.iter().all(|&w| w > 0), field, "widths must be positive")?;
        }
        check(self.batch_size >= 2, "batch_size", "must be at least 2 for batch norm")?;
        check(self.beta_max >= 0.0 && self.beta_max.is_finite(), "beta_max", "must be a non-negative number")?;
        check(
            self.temperature.start > 0.0 && self.temperature.end > 0.0,
            "temperature",
            "start and end must be positive",
        )?;
        check(self.soft_sigma > 0.0, "soft_sigma", "must be positive")?;
        check(
            self.channel_prior > 0.0 && self.channel_prior < 1.0,
            "channel_prior",
            "must lie in (0, 1)",
        )?;
        check(self.lambda_w >= 0.0, "lambda_w", "must be non-negative")?;
        check(self.bandwidth_decay_factor >= 0.0, "bandwidth_decay_factor", "must be non-negative")?;
        check(self.lambda_b > 0.0, "lambda_b", "must be positive")?;
        check(self.lambda_t > 0.0, "lambda_t", "must be positive")?;
        if let FeatureLikelihood::Gaussian { precision } = self.feature_likelihood {
            check(precision > 0.0, "feature_likelihood.precision", "must be positive")?;
        }
        check(
            (0.0..1.0).contains(&self.input_dropout),
            "input_dropout",
            "must lie in [0, 1)",
        )?;
        check(
            self.bn_momentum >= 0.0 && self.bn_momentum < 1.0,
            "bn_momentum",
            "must lie in [0, 1)",
        )?;
        check(self.bn_epsilon > 0.0, "bn_epsilon", "must be positive")?;
        check(self.adam.learning_rate > 0.0, "adam.learning_rate", "must be positive")?;
        check(
            (0.0..1.0).contains(&self.adam.beta1) && (0.0..1.0).contains(&self.adam.beta2),
            "adam",
            "beta1 and beta2 must lie in [0, 1)",
        )?;
        Ok(())
    }

    /// The hidden rating embedding width `K_h`.
    pub fn embedding_dim(&self) -> usize {
        self.collab_hidden[0]
    }
}
