use ndarray::Array2;
use rand::Rng;

use super::config::{ChannelKind, FeatureLikelihood, VbaeConfig};
use crate::error::{Error, Result};
use crate::stochastic::{standard_normal, NoiseSource, NoiseStream};
use crate::tensor::{Activation, BlockId, ParamStore, ScalarBatchNorm};

/// Weight and bias of one dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: BlockId,
    pub bias: BlockId,
    pub activation: Activation,
}

/// Block ids of every parameter of the model, grouped by tower.
#[derive(Debug, Clone)]
pub struct Layout {
    pub n_items: usize,
    pub n_features: usize,
    pub latent_dim: usize,
    /// First collaborative layer over the sparse rating row.
    pub embed: Dense,
    /// Feature part of the first layer of the concatenation baseline.
    pub embed_features: Option<BlockId>,
    pub collab_hidden: Vec<Dense>,
    pub collab_mu: Dense,
    pub collab_logstd: Dense,
    pub alpha_weight: BlockId,
    pub alpha_bias: BlockId,
    /// Rating generation network; the last layer emits item logits.
    pub decoder: Vec<Dense>,
    /// Feature inference network; the generation network runs these
    /// transposed in reverse order, ending with the `feature_mu` weights.
    pub feature_hidden: Vec<Dense>,
    pub feature_mu: Dense,
    pub feature_logstd: Dense,
    /// Biases of the feature generation network, in generation order.
    pub feature_decoder_bias: Vec<BlockId>,
    pub feature_output: Activation,
    /// Running batch-norm mean and variance, stored as a `1 × 2` block.
    pub bn_state: BlockId,
}

fn init_weight<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || std * standard_normal(rng))
}

fn dense<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    input: usize,
    output: usize,
    activation: Activation,
) -> Dense {
    Dense {
        weight: store.push(format!("{name}.w"), init_weight(rng, input, output)),
        bias: store.push(format!("{name}.b"), Array2::zeros((1, output))),
        activation,
    }
}

impl Layout {
    /// Allocates and initializes all blocks: Glorot-normal weights, zero
    /// biases, and a bandwidth head that starts at the channel prior.
    pub fn build(config: &VbaeConfig, n_items: usize, n_features: usize) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if n_items == 0 {
            return Err(Error::EmptyDataset("model needs at least one item".into()));
        }
        let needs_features = config.channel.is_fused() || config.channel == ChannelKind::ConcatBaseline;
        if needs_features && config.channel != ChannelKind::Stop && n_features == 0 {
            return Err(Error::Config(format!(
                "channel `{}` needs user features",
                config.channel
            )));
        }
        let mut rng = NoiseSource::new(config.seed).rng(NoiseStream::Init, 0, 0);
        let mut p = ParamStore::new();
        let k = config.latent_dim;
        let kh = config.embedding_dim();

        let embed_act = if config.channel.normalizes_input() {
            Activation::Sigmoid
        } else {
            Activation::Identity
        };
        let embed = dense(&mut p, &mut rng, "b.embed", n_items, kh, embed_act);
        let embed_features = (config.channel == ChannelKind::ConcatBaseline)
            .then(|| p.push("b.embed.x", init_weight(&mut rng, n_features, kh)));
        let mut collab_hidden = Vec::new();
        let mut width = kh;
        for (i, &w) in config.collab_hidden.iter().enumerate().skip(1) {
            collab_hidden.push(dense(&mut p, &mut rng, &format!("b.hidden{i}"), width, w, Activation::Sigmoid));
            width = w;
        }
        let collab_mu = dense(&mut p, &mut rng, "b.mu", width, k, Activation::Identity);
        let collab_logstd = dense(&mut p, &mut rng, "b.logstd", width, k, Activation::Identity);
        let alpha_weight = p.push("b.alpha.w", Array2::zeros((1, 1)));
        let alpha_bias = p.push(
            "b.alpha.b",
            Array2::from_elem((1, 1), crate::tensor::logit(config.channel_prior)),
        );

        let mut decoder = Vec::new();
        let mut width = k;
        for (i, &w) in config.decoder_hidden.iter().enumerate() {
            decoder.push(dense(&mut p, &mut rng, &format!("dec{i}"), width, w, Activation::Sigmoid));
            width = w;
        }
        decoder.push(dense(&mut p, &mut rng, "dec.out", width, n_items, Activation::Identity));

        let s = n_features.max(1);
        let mut feature_hidden = Vec::new();
        let mut width = s;
        for (i, &w) in config.feature_hidden.iter().enumerate() {
            feature_hidden.push(dense(&mut p, &mut rng, &format!("t.layer{i}"), width, w, Activation::Sigmoid));
            width = w;
        }
        let feature_mu = dense(&mut p, &mut rng, "t.mu", width, k, Activation::Identity);
        let feature_logstd = dense(&mut p, &mut rng, "t.logstd", width, k, Activation::Identity);
        let mut feature_decoder_bias = Vec::new();
        for (i, &w) in config.feature_hidden.iter().enumerate().rev() {
            feature_decoder_bias.push(p.push(format!("t.dec{}.b", i + 1), Array2::zeros((1, w))));
        }
        feature_decoder_bias.push(p.push("t.dec0.b", Array2::zeros((1, s))));
        let feature_output = match config.feature_likelihood {
            FeatureLikelihood::Bernoulli => Activation::Sigmoid,
            FeatureLikelihood::Gaussian { .. } => Activation::Identity,
        };

        let bn = ScalarBatchNorm::default();
        let bn_state = p.push(
            "bn.state",
            Array2::from_shape_vec((1, 2), vec![bn.running_mean, bn.running_var]).expect("shape"),
        );

        Ok((
            Self {
                n_items,
                n_features: s,
                latent_dim: k,
                embed,
                embed_features,
                collab_hidden,
                collab_mu,
                collab_logstd,
                alpha_weight,
                alpha_bias,
                decoder,
                feature_hidden,
                feature_mu,
                feature_logstd,
                feature_decoder_bias,
                feature_output,
                bn_state,
            },
            p,
        ))
    }

    fn dense_blocks(layers: &[Dense]) -> impl Iterator<Item = BlockId> + '_ {
        layers.iter().flat_map(|d| [d.weight, d.bias])
    }

    /// Trainable blocks of the collaborative tower, including the rating
    /// generation network and the bandwidth head.
    pub fn collaborative_blocks(&self) -> Vec<BlockId> {
        let mut ids = vec![self.embed.weight, self.embed.bias];
        ids.extend(self.embed_features);
        ids.extend(Self::dense_blocks(&self.collab_hidden));
        ids.extend(Self::dense_blocks(&[self.collab_mu, self.collab_logstd]));
        ids.extend([self.alpha_weight, self.alpha_bias]);
        ids.extend(Self::dense_blocks(&self.decoder));
        ids
    }

    /// Trainable blocks of the feature tower.
    pub fn feature_blocks(&self) -> Vec<BlockId> {
        let mut ids: Vec<BlockId> = Self::dense_blocks(&self.feature_hidden).collect();
        ids.extend(Self::dense_blocks(&[self.feature_mu, self.feature_logstd]));
        ids.extend(self.feature_decoder_bias.iter().copied());
        ids
    }

    pub fn is_bandwidth_block(&self, id: BlockId) -> bool {
        id == self.alpha_weight || id == self.alpha_bias
    }

    /// Feature generation network as `(weight used transposed, bias, activation)`.
    pub fn feature_decoder(&self) -> Vec<Dense> {
        let mut layers = Vec::with_capacity(self.feature_hidden.len() + 1);
        let encoders: Vec<Dense> = self
            .feature_hidden
            .iter()
            .copied()
            .chain(std::iter::once(self.feature_mu))
            .collect();
        for (step, enc) in encoders.iter().rev().enumerate() {
            let last = step + 1 == encoders.len();
            layers.push(Dense {
                weight: enc.weight,
                bias: self.feature_decoder_bias[step],
                activation: if last { self.feature_output } else { Activation::Sigmoid },
            });
        }
        layers
    }

    pub fn batch_norm(&self, params: &ParamStore, config: &VbaeConfig) -> ScalarBatchNorm {
        let s = params.get(self.bn_state);
        ScalarBatchNorm {
            running_mean: s[[0, 0]],
            running_var: s[[0, 1]],
            momentum: config.bn_momentum,
            epsilon: config.bn_epsilon,
        }
    }

    pub fn store_batch_norm(&self, params: &mut ParamStore, bn: &ScalarBatchNorm) {
        let s = params.get_mut(self.bn_state);
        s[[0, 0]] = bn.running_mean;
        s[[0, 1]] = bn.running_var;
    }
}
