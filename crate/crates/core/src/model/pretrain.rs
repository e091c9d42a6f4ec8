use log::info;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{FeatureLikelihood, VbaeConfig};
use super::forward::{bernoulli_log_likelihood, gaussian_log_likelihood, stack_backward, stack_forward};
use super::layout::{Dense, Layout};
use crate::error::Result;
use crate::stochastic::{NoiseSource, NoiseStream};
use crate::tensor::{Activation, AdamState, ParamStore};

/// Mean reconstruction loss of one layer after `epoch` passes (0 = before
/// training).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub layer: usize,
    pub epoch: usize,
    pub loss: f64,
}

struct LayerAe {
    encoder: Dense,
    decoder: Dense,
    gaussian: Option<f64>,
}

impl LayerAe {
    fn loss_and_grads(&self, p: &ParamStore, x: &Array2<f64>, grads: Option<&mut ParamStore>) -> Result<f64> {
        let enc = stack_forward(p, std::slice::from_ref(&self.encoder), x.clone(), false)?;
        let dec = stack_forward(p, std::slice::from_ref(&self.decoder), enc[1].clone(), true)?;
        let (ll, mut g) = match self.gaussian {
            None => bernoulli_log_likelihood(x.view(), dec[1].view()),
            Some(precision) => gaussian_log_likelihood(x.view(), dec[1].view(), precision),
        };
        let inv_n = 1.0 / x.nrows() as f64;
        if let Some(grads) = grads {
            g *= inv_n;
            let g_h = stack_backward(p, std::slice::from_ref(&self.decoder), &dec, g, true, Some(grads))?;
            stack_backward(p, std::slice::from_ref(&self.encoder), &enc, g_h, false, Some(grads))?;
        }
        Ok(-ll.iter().sum::<f64>() * inv_n)
    }
}

/// Greedy layerwise pretraining of the feature inference network. Each layer
/// (the `μ_t` head last) is trained as a one-layer auto-encoder with tied
/// weights on the activations of the layers below it; the decoder bias it
/// learns initializes the matching generation-network bias.
pub fn pretrain_features(
    config: &VbaeConfig,
    layout: &Layout,
    params: &mut ParamStore,
    x: &Array2<f64>,
    epochs: usize,
) -> Result<Vec<PretrainRecord>> {
    let mut history = Vec::new();
    if epochs == 0 || x.nrows() == 0 {
        return Ok(history);
    }
    let encoders: Vec<Dense> = layout
        .feature_hidden
        .iter()
        .copied()
        .chain(std::iter::once(layout.feature_mu))
        .collect();
    let n_layers = encoders.len();
    let source = NoiseSource::new(config.seed);
    let mut input = x.clone();
    for (l, enc) in encoders.iter().enumerate() {
        let gaussian = match (l, config.feature_likelihood) {
            (0, FeatureLikelihood::Gaussian { precision }) => Some(precision),
            _ => None,
        };
        let ae = LayerAe {
            encoder: *enc,
            decoder: Dense {
                weight: enc.weight,
                bias: layout.feature_decoder_bias[n_layers - 1 - l],
                activation: if gaussian.is_some() {
                    Activation::Identity
                } else {
                    Activation::Sigmoid
                },
            },
            gaussian,
        };
        let mut adam = AdamState::new(config.adam, params, vec![enc.weight, enc.bias, ae.decoder.bias]);
        history.push(PretrainRecord {
            layer: l,
            epoch: 0,
            loss: ae.loss_and_grads(params, &input, None)?,
        });
        let mut order: Vec<usize> = (0..input.nrows()).collect();
        for epoch in 1..=epochs {
            order.shuffle(&mut source.rng(NoiseStream::Pretrain, epoch as u64, l as u64));
            for chunk in order.chunks(config.batch_size) {
                let xb = input.select(Axis(0), chunk);
                let mut grads = params.zeros_like();
                ae.loss_and_grads(params, &xb, Some(&mut grads))?;
                adam.step(params, &grads)?;
            }
            let loss = ae.loss_and_grads(params, &input, None)?;
            history.push(PretrainRecord { layer: l, epoch, loss });
        }
        info!(
            "pretrained feature layer {l}: loss {:.4} -> {:.4}",
            history[history.len() - epochs - 1].loss,
            history.last().expect("record").loss
        );
        input = stack_forward(params, std::slice::from_ref(enc), input, false)?.pop().expect("output");
        if enc.activation == Activation::Identity {
            break;
        }
    }
    Ok(history)
}
