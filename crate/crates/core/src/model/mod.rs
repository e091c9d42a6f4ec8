//! The variational bandwidth auto-encoder.
//!
//! A collaborative tower encodes a user's rating row into a hidden embedding
//! `h_b`. Its direction parameterizes the Gaussian `z_b` and its norm, after
//! batch normalization, the bandwidth `α` of a user-dependent channel. A
//! feature tower encodes the user's features into `z_t`. Ratings are decoded
//! from `v = z_b + d·z_t` with a multinomial likelihood, where `d` is the
//! channel variable. Training alternates a collaborative step and a feature
//! step, each optimizing its own tower with the other frozen.

mod config;
mod forward;
mod layout;
mod loss;
mod pretrain;
mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{ChannelKind, FeatureLikelihood, VbaeConfig};
pub use forward::{
    bernoulli_log_likelihood, decode_features, decode_ratings, encode_features, encode_ratings,
    fuse, gaussian_log_likelihood, infer_bandwidth, multinomial_log_likelihood, Bandwidth,
    FeatureEncoding, RatingEncoding, FEATURE_PROB_CLAMP,
};
pub use layout::{Dense, Layout};
pub use loss::{b_step_loss, elbo_estimate, t_step_loss, Batch, LossOutput, LossParts, StepNoise, StepSettings};
pub use pretrain::{pretrain_features, PretrainRecord};
pub use train::{train, EpochRecord, TrainData, TrainOutcome};

use crate::error::{Error, Result};
use crate::stochastic::{NoiseSource, NoiseStream};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore};

/// Configuration, block layout and parameter values of one model.
#[derive(Debug, Clone)]
pub struct Vbae {
    config: VbaeConfig,
    layout: Layout,
    params: ParamStore,
}

/// Evaluation-mode outputs for a batch of users.
#[derive(Debug, Clone)]
pub struct Scores {
    /// Item logits, `users × J`.
    pub logits: Array2<f64>,
    /// Bandwidth per user; empty for variants without one.
    pub alpha: Vec<f64>,
    /// Channel value used in the fusion.
    pub channel: Vec<f64>,
    /// `‖h_b‖` per user.
    pub norm: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    n_items: usize,
    n_features: usize,
    config: VbaeConfig,
}

const HEADER_FILE: &str = "model.json";
const PARAMS_FILE: &str = "params.ckpt";

impl Vbae {
    pub fn new(config: VbaeConfig, n_items: usize, n_features: usize) -> Result<Self> {
        let (layout, params) = Layout::build(&config, n_items, n_features)?;
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &VbaeConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn n_items(&self) -> usize {
        self.layout.n_items
    }

    pub fn n_features(&self) -> usize {
        self.layout.n_features
    }

    pub fn b_step_loss(&self, batch: &Batch, noise: &StepNoise, settings: StepSettings) -> Result<LossOutput> {
        b_step_loss(&self.config, &self.layout, &self.params, batch, noise, settings)
    }

    pub fn t_step_loss(&self, batch: &Batch, noise: &StepNoise, settings: StepSettings) -> Result<LossOutput> {
        t_step_loss(&self.config, &self.layout, &self.params, batch, noise, settings)
    }

    /// Evaluation-mode scores: `v = μ_b + d̄·μ_t` where `d̄` is `α` for the
    /// soft channel and one seeded Bernoulli(α) draw per user for the hard
    /// channel. `channel` overrides `d̄` when given.
    pub fn score(
        &self,
        users: &[usize],
        rows: &[&[usize]],
        features: ArrayView2<f64>,
        channel: Option<&[f64]>,
    ) -> Result<Scores> {
        let n = rows.len();
        if users.len() != n || features.nrows() != n {
            return Err(Error::dimension("scored users", n, users.len()));
        }
        let c = &self.config;
        let feats = self.layout.embed_features.map(|_| features);
        let enc = encode_ratings(c, &self.layout, &self.params, rows, 1.0, feats)?;
        let (alpha, z_t) = if c.channel.is_fused() {
            let bn = self.layout.batch_norm(&self.params, c);
            let head = (
                self.params.get(self.layout.alpha_weight)[[0, 0]],
                self.params.get(self.layout.alpha_bias)[[0, 0]],
            );
            let bw = infer_bandwidth(&enc.norm, &enc.empty, &bn, head, false)?;
            let mu_t = encode_features(&self.layout, &self.params, features)?.mu;
            (bw.alpha, Some(mu_t))
        } else {
            (Vec::new(), None)
        };
        let d: Vec<f64> = match (channel, c.channel) {
            (Some(d), _) => {
                if d.len() != n {
                    return Err(Error::dimension("channel override", n, d.len()));
                }
                d.to_vec()
            }
            (None, ChannelKind::Soft) => alpha.clone(),
            (None, ChannelKind::Hard) => {
                let source = NoiseSource::new(c.seed);
                users
                    .iter()
                    .zip(&alpha)
                    .map(|(&u, &a)| {
                        let draw: f64 = source.rng(NoiseStream::Prediction, 0, u as u64).random();
                        if draw < a {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
            (None, kind) => vec![kind.fixed_channel().unwrap_or(0.0); n],
        };
        let v = forward::fuse_rows(&enc.mu, z_t.as_ref(), &d);
        let logits = decode_ratings(&self.layout, &self.params, v)?.pop().expect("logits");
        Ok(Scores {
            logits,
            alpha: if c.channel.has_bandwidth() { alpha } else { Vec::new() },
            channel: d,
            norm: enc.norm,
        })
    }

    /// Writes `model.json` (configuration and sizes) and `params.ckpt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let header = ModelHeader {
            n_items: self.layout.n_items,
            n_features: self.layout.n_features,
            config: self.config.clone(),
        };
        std::fs::write(dir.join(HEADER_FILE), serde_json::to_string_pretty(&header)?)?;
        write_checkpoint(BufWriter::new(File::create(dir.join(PARAMS_FILE))?), &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header: ModelHeader = serde_json::from_str(&std::fs::read_to_string(dir.join(HEADER_FILE))?)?;
        let mut model = Vbae::new(header.config, header.n_items, header.n_features)?;
        let stored = read_checkpoint(BufReader::new(File::open(dir.join(PARAMS_FILE))?))?;
        model.params.load_from(&stored)?;
        Ok(model)
    }
}
