use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::config::{ChannelKind, FeatureLikelihood, VbaeConfig};
use super::forward::{
    bernoulli_log_likelihood, decode_features, decode_ratings, encode_features,
    encode_ratings, encode_ratings_backward, fuse_rows, gaussian_log_likelihood,
    infer_bandwidth, multinomial_log_likelihood, stack_backward, Bandwidth, FeatureEncoding,
    RatingEncoding,
};
use super::layout::{Dense, Layout};
use crate::error::{Error, Result};
use crate::stochastic::{
    concrete_from_logit, gumbel, kl_bernoulli_from_logit, kl_gaussian_coord,
    kl_gaussian_coord_grad, kl_soft_channel_from_logit, standard_normal, NoiseSource, NoiseStream,
};
use crate::tensor::{logit, sigmoid, BatchStats, BlockId, ParamStore};

/// One mini-batch of users.
#[derive(Debug, Clone)]
pub struct Batch {
    pub users: Vec<usize>,
    /// Items fed to the inference network (possibly after dropout).
    pub inputs: Vec<Vec<usize>>,
    /// Scale applied to every active input entry.
    pub input_scale: f64,
    /// Items whose likelihood is evaluated.
    pub targets: Vec<Vec<usize>>,
    /// Dense user features, `len(users) × S`.
    pub features: Array2<f64>,
}

impl Batch {
    /// Inputs and targets are the same rows, without dropout.
    pub fn new(users: Vec<usize>, rows: Vec<Vec<usize>>, features: Array2<f64>) -> Self {
        Self {
            users,
            targets: rows.clone(),
            inputs: rows,
            input_scale: 1.0,
            features,
        }
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    fn input_refs(&self) -> Vec<&[usize]> {
        self.inputs.iter().map(Vec::as_slice).collect()
    }

    fn target_refs(&self) -> Vec<&[usize]> {
        self.targets.iter().map(Vec::as_slice).collect()
    }
}

/// Reparameterization noise of one step, frozen so the loss is a
/// deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    /// Standard normal noise of the Gaussian embedding, `n × K`.
    pub eps: Array2<f64>,
    /// Two Gumbel (hard) or standard normal (soft) draws per user.
    pub channel: Vec<[f64; 2]>,
}

impl StepNoise {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            eps: Array2::zeros((n, k)),
            channel: vec![[0.0; 2]; n],
        }
    }

    /// Draws the noise of every user from its own keyed stream.
    pub fn draw(source: &NoiseSource, stream: NoiseStream, epoch: u64, users: &[usize], k: usize, channel: ChannelKind) -> Self {
        let mut eps = Array2::zeros((users.len(), k));
        let mut ch = Vec::with_capacity(users.len());
        for (i, &u) in users.iter().enumerate() {
            let mut rng = source.rng(stream, epoch, u as u64);
            for e in eps.row_mut(i) {
                *e = standard_normal(&mut rng);
            }
            ch.push(match channel {
                ChannelKind::Hard => [gumbel(&mut rng), gumbel(&mut rng)],
                _ => [standard_normal(&mut rng), standard_normal(&mut rng)],
            });
        }
        Self { eps, channel: ch }
    }
}

/// Step-level knobs that are not part of the configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub beta: f64,
    pub temperature: f64,
    /// Overrides the channel variable with a constant.
    pub force_channel: Option<f64>,
}

impl StepSettings {
    pub fn new(beta: f64, temperature: f64) -> Self {
        Self {
            beta,
            temperature,
            force_channel: None,
        }
    }
}

/// Per-user means of the loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub rating_nll: f64,
    pub feature_nll: f64,
    pub kl_b: f64,
    pub kl_channel: f64,
    pub kl_t: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub parts: LossParts,
    pub grads: ParamStore,
    /// Batch statistics of the norm, for the running averages.
    pub bn_stats: Option<BatchStats>,
    /// Bandwidth of every user (empty for variants without one).
    pub alpha: Vec<f64>,
}

/// `Σ (λ/2)‖θ‖²` over `blocks` with the gradient added into `grads`; the
/// bandwidth head uses the larger decay.
fn weight_penalty(config: &VbaeConfig, layout: &Layout, p: &ParamStore, blocks: &[BlockId], grads: &mut ParamStore) -> f64 {
    let mut total = 0.0;
    for &id in blocks {
        let lambda = if layout.is_bandwidth_block(id) {
            config.lambda_w * config.bandwidth_decay_factor
        } else {
            config.lambda_w
        };
        if lambda == 0.0 {
            continue;
        }
        let w = p.get(id);
        total += 0.5 * lambda * w.iter().map(|x| x * x).sum::<f64>();
        grads.get_mut(id).scaled_add(lambda, w);
    }
    total
}

fn sample_gaussian_rows(mu: &Array2<f64>, log_std: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    mu + &(eps * &log_std.mapv(f64::exp))
}

fn check_batch(batch: &Batch, layout: &Layout, noise: &StepNoise) -> Result<()> {
    let n = batch.len();
    if batch.inputs.len() != n || batch.targets.len() != n || batch.features.nrows() != n {
        return Err(Error::dimension("batch rows", n, batch.inputs.len()));
    }
    if noise.eps.dim() != (n, layout.latent_dim) || noise.channel.len() != n {
        return Err(Error::dimension(
            "step noise",
            format!("({n}, {})", layout.latent_dim),
            format!("{:?}", noise.eps.dim()),
        ));
    }
    Ok(())
}

fn features_for<'a>(layout: &Layout, batch: &'a Batch) -> Option<ArrayView2<'a, f64>> {
    layout.embed_features.map(|_| batch.features.view())
}

/// Channel value, its derivative with respect to the bandwidth logit, and
/// the channel KL with its logit derivative.
fn channel_sample(config: &VbaeConfig, logit_alpha: f64, noise: [f64; 2], temperature: f64) -> (f64, f64, f64, f64) {
    match config.channel {
        ChannelKind::Hard => {
            let d = concrete_from_logit(logit_alpha, noise[0], noise[1], temperature);
            let (kl, g) = kl_bernoulli_from_logit(logit_alpha, config.channel_prior);
            (d, d * (1.0 - d) / temperature, kl, g)
        }
        _ => {
            let d = sigmoid(logit_alpha + config.soft_sigma * (noise[0] - noise[1]));
            let (kl, g) = kl_soft_channel_from_logit(logit_alpha, logit(config.channel_prior), config.soft_sigma);
            (d, d * (1.0 - d), kl, g)
        }
    }
}

/// Collaborative-step objective: multinomial NLL of the ratings from
/// `v = z_b + d·μ_t`, `β·KL(z_b)`, the channel KL and weight decay on the
/// collaborative blocks, averaged over users. The feature tower is read but
/// receives no gradient.
pub fn b_step_loss(
    config: &VbaeConfig,
    layout: &Layout,
    p: &ParamStore,
    batch: &Batch,
    noise: &StepNoise,
    settings: StepSettings,
) -> Result<LossOutput> {
    check_batch(batch, layout, noise)?;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let inputs = batch.input_refs();
    if inputs.iter().any(|r| r.is_empty()) {
        return Err(Error::Usage("b-step batches must not contain empty input rows".into()));
    }
    let feats = features_for(layout, batch);
    let enc = encode_ratings(config, layout, p, &inputs, batch.input_scale, feats)?;
    let fused = config.channel.is_fused();
    let forced = settings.force_channel.or(config.channel.fixed_channel());

    let bw = if fused {
        let bn = layout.batch_norm(p, config);
        let head = (p.get(layout.alpha_weight)[[0, 0]], p.get(layout.alpha_bias)[[0, 0]]);
        Some(infer_bandwidth(&enc.norm, &enc.empty, &bn, head, true)?)
    } else {
        None
    };

    let mut d = vec![0.0; n];
    let mut dd_dlogit = vec![0.0; n];
    let mut kl_ch = vec![0.0; n];
    let mut kl_ch_grad = vec![0.0; n];
    if let Some(bw) = &bw {
        for u in 0..n {
            match forced {
                Some(c) => d[u] = c,
                None => {
                    let (du, g, kl, gk) = channel_sample(config, bw.logit[u], noise.channel[u], settings.temperature);
                    d[u] = du;
                    dd_dlogit[u] = g;
                    kl_ch[u] = kl;
                    kl_ch_grad[u] = gk;
                }
            }
        }
    }

    let z_t = if fused {
        Some(encode_features(layout, p, batch.features.view())?.mu)
    } else {
        None
    };
    let z_b = sample_gaussian_rows(&enc.mu, &enc.log_std, &noise.eps);
    let v = fuse_rows(&z_b, z_t.as_ref(), &d);
    let acts = decode_ratings(layout, p, v)?;
    let targets = batch.target_refs();
    let (ll, mut g_logits) = multinomial_log_likelihood(acts.last().expect("logits").view(), &targets)?;
    g_logits *= inv_n;

    let mut kl_b = vec![0.0; n];
    let mut g_mu = Array2::zeros(enc.mu.raw_dim());
    let mut g_ls = Array2::zeros(enc.mu.raw_dim());
    let mut grads = p.zeros_like();
    let g_v = stack_backward(p, &layout.decoder, &acts, g_logits, false, Some(&mut grads))?;
    for u in 0..n {
        if enc.empty[u] {
            continue;
        }
        for k in 0..layout.latent_dim {
            let (m, ls) = (enc.mu[[u, k]], enc.log_std[[u, k]]);
            kl_b[u] += kl_gaussian_coord(m, ls, config.lambda_b);
            let (gm, gs) = kl_gaussian_coord_grad(m, ls, config.lambda_b);
            g_mu[[u, k]] = g_v[[u, k]] + settings.beta * inv_n * gm;
            g_ls[[u, k]] = g_v[[u, k]] * noise.eps[[u, k]] * ls.exp() + settings.beta * inv_n * gs;
        }
    }

    let mut g_norm = None;
    if let (Some(bw), Some(z_t), None) = (&bw, &z_t, forced) {
        let mut g_logit = vec![0.0; n];
        for u in 0..n {
            let g_d = g_v.row(u).dot(&z_t.row(u));
            g_logit[u] = g_d * dd_dlogit[u] + inv_n * kl_ch_grad[u];
        }
        let w_alpha = p.get(layout.alpha_weight)[[0, 0]];
        grads.get_mut(layout.alpha_weight)[[0, 0]] += g_logit.iter().zip(&bw.normalized).map(|(g, x)| g * x).sum::<f64>();
        grads.get_mut(layout.alpha_bias)[[0, 0]] += g_logit.iter().sum::<f64>();
        let g_normalized: Vec<f64> = g_logit.iter().map(|g| g * w_alpha).collect();
        let stats = bw.stats.expect("training mode");
        g_norm = Some(crate::tensor::scalar_bn_backward(&bw.normalized, stats.var, config.bn_epsilon, &g_normalized));
    }
    encode_ratings_backward(config, layout, p, &inputs, feats, &enc, &g_mu, &g_ls, g_norm.as_deref(), &mut grads)?;

    let penalty = weight_penalty(config, layout, p, &layout.collaborative_blocks(), &mut grads);
    let mean = |v: &[f64]| v.iter().sum::<f64>() * inv_n;
    let rating_nll = -mean(&ll);
    let kl_b_mean = mean(&kl_b);
    let kl_ch_mean = mean(&kl_ch);
    let total = rating_nll + settings.beta * kl_b_mean + kl_ch_mean + penalty;
    if !total.is_finite() {
        return Err(Error::Divergence(format!("non-finite b-step loss {total}")));
    }
    Ok(LossOutput {
        parts: LossParts {
            total,
            rating_nll,
            kl_b: kl_b_mean,
            kl_channel: kl_ch_mean,
            penalty,
            ..LossParts::default()
        },
        grads,
        bn_stats: bw.as_ref().and_then(|b| b.stats),
        alpha: if config.channel.has_bandwidth() {
            bw.map(|b| b.alpha).unwrap_or_default()
        } else {
            Vec::new()
        },
    })
}

/// Frozen collaborative quantities of the t-step: `μ_b` and the channel
/// value computed with evaluation-mode batch norm.
fn frozen_collaborative(
    config: &VbaeConfig,
    layout: &Layout,
    p: &ParamStore,
    batch: &Batch,
    force: Option<f64>,
) -> Result<(RatingEncoding, Vec<f64>)> {
    let inputs = batch.input_refs();
    let enc = encode_ratings(config, layout, p, &inputs, batch.input_scale, None)?;
    let d = match force.or(config.channel.fixed_channel()) {
        Some(c) => vec![c; batch.len()],
        None => {
            let bn = layout.batch_norm(p, config);
            let head = (p.get(layout.alpha_weight)[[0, 0]], p.get(layout.alpha_bias)[[0, 0]]);
            infer_bandwidth(&enc.norm, &enc.empty, &bn, head, false)?.alpha
        }
    };
    Ok((enc, d))
}

/// Feature reconstruction log-likelihood per row and the gradient of its
/// negation with respect to the decoder output.
fn feature_likelihood(config: &VbaeConfig, x: ArrayView2<f64>, out: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
    match config.feature_likelihood {
        FeatureLikelihood::Bernoulli => bernoulli_log_likelihood(x, out),
        FeatureLikelihood::Gaussian { precision } => gaussian_log_likelihood(x, out, precision),
    }
}

fn feature_head_backward(
    layout: &Layout,
    p: &ParamStore,
    enc: &FeatureEncoding,
    g_mu: Array2<f64>,
    g_ls: Array2<f64>,
    grads: &mut ParamStore,
) -> Result<()> {
    let top = enc.acts.last().expect("input");
    let mut g_top = Array2::zeros(top.raw_dim());
    for (head, g) in [(&layout.feature_mu, g_mu), (&layout.feature_logstd, g_ls)] {
        let acts = [top.clone(), Array2::zeros(g.raw_dim())];
        g_top += &stack_backward(p, std::slice::from_ref::<Dense>(head), &acts, g, false, Some(grads))?;
    }
    stack_backward(p, &layout.feature_hidden, &enc.acts, g_top, false, Some(grads))?;
    Ok(())
}

/// Feature-step objective: rating NLL from `v = μ_b + d·z_t` with `μ_b` and
/// `d` frozen, feature reconstruction NLL, `KL(z_t)` and weight decay on the
/// feature blocks. Only feature-tower blocks receive gradients.
pub fn t_step_loss(
    config: &VbaeConfig,
    layout: &Layout,
    p: &ParamStore,
    batch: &Batch,
    noise: &StepNoise,
    settings: StepSettings,
) -> Result<LossOutput> {
    check_batch(batch, layout, noise)?;
    if !config.channel.is_fused() {
        return Err(Error::Usage(format!("channel `{}` has no feature tower", config.channel)));
    }
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let (collab, d) = frozen_collaborative(config, layout, p, batch, settings.force_channel)?;
    let x = batch.features.view();
    let fenc = encode_features(layout, p, x)?;
    let z_t = sample_gaussian_rows(&fenc.mu, &fenc.log_std, &noise.eps);

    let v = fuse_rows(&collab.mu, Some(&z_t), &d);
    let acts = decode_ratings(layout, p, v)?;
    let targets = batch.target_refs();
    let (ll, mut g_logits) = multinomial_log_likelihood(acts.last().expect("logits").view(), &targets)?;
    g_logits *= inv_n;
    let g_v = stack_backward(p, &layout.decoder, &acts, g_logits, false, None)?;

    let mut grads = p.zeros_like();
    let dec_layers = layout.feature_decoder();
    let dec = decode_features(layout, p, z_t.clone())?;
    let (fll, mut g_out) = feature_likelihood(config, x, dec.last().expect("output").view());
    g_out *= inv_n;
    let g_zt_rec = stack_backward(p, &dec_layers, &dec, g_out, true, Some(&mut grads))?;

    let mut kl_t = vec![0.0; n];
    let mut g_mu = Array2::zeros(fenc.mu.raw_dim());
    let mut g_ls = Array2::zeros(fenc.mu.raw_dim());
    for u in 0..n {
        for k in 0..layout.latent_dim {
            let (m, ls) = (fenc.mu[[u, k]], fenc.log_std[[u, k]]);
            kl_t[u] += kl_gaussian_coord(m, ls, config.lambda_t);
            let (gm, gs) = kl_gaussian_coord_grad(m, ls, config.lambda_t);
            let g_z = d[u] * g_v[[u, k]] + g_zt_rec[[u, k]];
            g_mu[[u, k]] = g_z + inv_n * gm;
            g_ls[[u, k]] = g_z * noise.eps[[u, k]] * ls.exp() + inv_n * gs;
        }
    }
    feature_head_backward(layout, p, &fenc, g_mu, g_ls, &mut grads)?;

    let penalty = weight_penalty(config, layout, p, &layout.feature_blocks(), &mut grads);
    let mean = |v: &[f64]| v.iter().sum::<f64>() * inv_n;
    let rating_nll = -mean(&ll);
    let feature_nll = -mean(&fll);
    let kl_t_mean = mean(&kl_t);
    let total = rating_nll + feature_nll + kl_t_mean + penalty;
    if !total.is_finite() {
        return Err(Error::Divergence(format!("non-finite t-step loss {total}")));
    }
    Ok(LossOutput {
        parts: LossParts {
            total,
            rating_nll,
            feature_nll,
            kl_t: kl_t_mean,
            penalty,
            ..LossParts::default()
        },
        grads,
        bn_stats: None,
        alpha: if config.channel.has_bandwidth() { d } else { Vec::new() },
    })
}

/// Single-sample estimate of the joint evidence lower bound, averaged over
/// users: `log p(r|v) + log p(x|z_t) − KL(z_b) − KL(d) − KL(z_t)`. Reference
/// value only; training uses the alternating objectives.
pub fn elbo_estimate(
    config: &VbaeConfig,
    layout: &Layout,
    p: &ParamStore,
    batch: &Batch,
    b_noise: &StepNoise,
    t_noise: &StepNoise,
    temperature: f64,
) -> Result<f64> {
    check_batch(batch, layout, b_noise)?;
    check_batch(batch, layout, t_noise)?;
    if !config.channel.is_fused() {
        return Err(Error::Usage(format!("channel `{}` has no feature tower", config.channel)));
    }
    let n = batch.len();
    let inputs = batch.input_refs();
    let enc = encode_ratings(config, layout, p, &inputs, batch.input_scale, None)?;
    let bn = layout.batch_norm(p, config);
    let head = (p.get(layout.alpha_weight)[[0, 0]], p.get(layout.alpha_bias)[[0, 0]]);
    let bw: Bandwidth = infer_bandwidth(&enc.norm, &enc.empty, &bn, head, true)?;
    let mut d = vec![0.0; n];
    let mut kl_ch = 0.0;
    for (u, slot) in d.iter_mut().enumerate() {
        match config.channel.fixed_channel() {
            Some(c) => *slot = c,
            None => {
                let (du, _, kl, _) = channel_sample(config, bw.logit[u], b_noise.channel[u], temperature);
                *slot = du;
                kl_ch += kl;
            }
        }
    }
    let z_b = sample_gaussian_rows(&enc.mu, &enc.log_std, &b_noise.eps);
    let fenc = encode_features(layout, p, batch.features.view())?;
    let z_t = sample_gaussian_rows(&fenc.mu, &fenc.log_std, &t_noise.eps);
    let acts = decode_ratings(layout, p, fuse_rows(&z_b, Some(&z_t), &d))?;
    let (ll, _) = multinomial_log_likelihood(acts.last().expect("logits").view(), &batch.target_refs())?;
    let dec = decode_features(layout, p, z_t)?;
    let (fll, _) = feature_likelihood(config, batch.features.view(), dec.last().expect("output").view());
    let mut kl = kl_ch;
    for u in 0..n {
        for k in 0..layout.latent_dim {
            kl += kl_gaussian_coord(enc.mu[[u, k]], enc.log_std[[u, k]], config.lambda_b);
            kl += kl_gaussian_coord(fenc.mu[[u, k]], fenc.log_std[[u, k]], config.lambda_t);
        }
    }
    Ok((ll.iter().sum::<f64>() + fll.iter().sum::<f64>() - kl) / n as f64)
}
