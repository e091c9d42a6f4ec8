use log::debug;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::layout::{Dense, Layout};
use super::VbaeConfig;
use crate::error::{Error, Result};
use crate::tensor::{
    affine_forward, preactivation_grad, sigmoid, softmax_logprob, sparse_affine_backward,
    sparse_affine_forward, Activation, ParamStore, ScalarBatchNorm,
};

/// Decoder outputs are clamped to `[CLAMP, 1 − CLAMP]` before taking logs.
pub const FEATURE_PROB_CLAMP: f64 = 1e-7;

pub(crate) fn bias<'a>(p: &'a ParamStore, d: &Dense) -> ArrayView1<'a, f64> {
    p.get(d.bias).row(0)
}

/// Runs a stack of dense layers. `acts[0]` is the input and `acts[i + 1]` the
/// output of layer `i`. With `transposed`, each layer computes `x·Wᵀ + b`.
pub(crate) fn stack_forward(
    p: &ParamStore,
    layers: &[Dense],
    input: Array2<f64>,
    transposed: bool,
) -> Result<Vec<Array2<f64>>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input);
    for layer in layers {
        let w = p.get(layer.weight);
        let w = if transposed { w.t() } else { w.view() };
        let out = affine_forward(acts.last().expect("input").view(), w, bias(p, layer), layer.activation)?;
        acts.push(out);
    }
    Ok(acts)
}

/// Backward pass of [`stack_forward`]. Parameter gradients are accumulated
/// into `grads` when given; the gradient with respect to the input is returned.
pub(crate) fn stack_backward(
    p: &ParamStore,
    layers: &[Dense],
    acts: &[Array2<f64>],
    upstream: Array2<f64>,
    transposed: bool,
    mut grads: Option<&mut ParamStore>,
) -> Result<Array2<f64>> {
    let mut g = upstream;
    for (i, layer) in layers.iter().enumerate().rev() {
        let pre = preactivation_grad(acts[i + 1].view(), layer.activation, g.view())?;
        if let Some(grads) = grads.as_deref_mut() {
            let gw = if transposed {
                pre.t().dot(&acts[i])
            } else {
                acts[i].t().dot(&pre)
            };
            *grads.get_mut(layer.weight) += &gw;
            let mut gb = grads.get_mut(layer.bias).row_mut(0);
            gb += &pre.sum_axis(Axis(0));
        }
        let w = p.get(layer.weight);
        g = if transposed { pre.dot(w) } else { pre.dot(&w.t()) };
    }
    Ok(g)
}

/// Collaborative inference network output for a batch of rating rows.
#[derive(Debug, Clone)]
pub struct RatingEncoding {
    /// Hidden rating embedding `h_b`.
    pub hidden: Array2<f64>,
    /// `‖h_b‖`, zero for empty rows.
    pub norm: Vec<f64>,
    /// Activations from the direction (or the raw embedding, for variants
    /// that normalize their input) through the hidden layers.
    pub acts: Vec<Array2<f64>>,
    pub mu: Array2<f64>,
    pub log_std: Array2<f64>,
    /// Rows with no active item; their posterior is the prior.
    pub empty: Vec<bool>,
    /// Per-row input scale applied in the first layer.
    pub scales: Vec<f64>,
}

impl RatingEncoding {
    /// `h_b / ‖h_b‖` (zero for empty rows) for fused variants.
    pub fn direction(&self) -> &Array2<f64> {
        &self.acts[0]
    }
}

/// Encodes sparse rating rows into `h_b`, its norm and direction, and the
/// Gaussian posterior of `z_b` inferred from the direction.
///
/// `input_scale` multiplies every active entry (inverted dropout). Variants
/// that normalize their input divide each row by `√N` instead of normalizing
/// `h_b`, and the concatenation baseline adds `x·W_x` in the first layer.
pub fn encode_ratings(
    config: &VbaeConfig,
    layout: &Layout,
    p: &ParamStore,
    rows: &[&[usize]],
    input_scale: f64,
    features: Option<ArrayView2<f64>>,
) -> Result<RatingEncoding> {
    let n = rows.len();
    let normalize_input = config.channel.normalizes_input();
    let scales: Vec<f64> = rows
        .iter()
        .map(|r| {
            if normalize_input && !r.is_empty() {
                input_scale / (r.len() as f64).sqrt()
            } else {
                input_scale
            }
        })
        .collect();
    let mut hidden = sparse_affine_forward(
        rows,
        Some(&scales),
        p.get(layout.embed.weight).view(),
        bias(p, &layout.embed),
        Activation::Identity,
    )?;
    if let Some(wx) = layout.embed_features {
        let x = features.ok_or_else(|| Error::Usage("concatenation baseline needs features".into()))?;
        if x.nrows() != n {
            return Err(Error::dimension("feature rows", n, x.nrows()));
        }
        hidden += &x.dot(p.get(wx));
    }
    if layout.embed.activation == Activation::Sigmoid {
        hidden.mapv_inplace(sigmoid);
    }
    let empty: Vec<bool> = rows.iter().map(|r| r.is_empty()).collect();

    let mut norm = vec![0.0; n];
    let first = if normalize_input {
        for (u, h) in hidden.rows().into_iter().enumerate() {
            norm[u] = h.dot(&h).sqrt();
        }
        hidden.clone()
    } else {
        let mut dir = hidden.clone();
        for (u, mut row) in dir.rows_mut().into_iter().enumerate() {
            let len = row.dot(&row).sqrt();
            if empty[u] || len == 0.0 {
                row.fill(0.0);
                continue;
            }
            norm[u] = len;
            row /= len;
        }
        dir
    };
    if empty.iter().any(|&e| e) {
        debug!("{} empty rating rows fall back to the prior", empty.iter().filter(|&&e| e).count());
    }

    let acts = stack_forward(p, &layout.collab_hidden, first, false)?;
    let top = acts.last().expect("input");
    let mut mu = affine_forward(top.view(), p.get(layout.collab_mu.weight).view(), bias(p, &layout.collab_mu), Activation::Identity)?;
    let mut log_std = affine_forward(
        top.view(),
        p.get(layout.collab_logstd.weight).view(),
        bias(p, &layout.collab_logstd),
        Activation::Identity,
    )?;
    let prior_log_std = -0.5 * config.lambda_b.ln();
    for (u, &e) in empty.iter().enumerate() {
        if e {
            mu.row_mut(u).fill(0.0);
            log_std.row_mut(u).fill(prior_log_std);
        }
    }
    Ok(RatingEncoding {
        hidden,
        norm,
        acts,
        mu,
        log_std,
        empty,
        scales,
    })
}

/// Backward pass of [`encode_ratings`] given gradients on `μ_b`, `log σ_b`
/// and the norm.
#[allow(clippy::too_many_arguments)]
pub(crate) fn encode_ratings_backward(
    config: &VbaeConfig,
    layout: &Layout,
    p: &ParamStore,
    rows: &[&[usize]],
    features: Option<ArrayView2<f64>>,
    enc: &RatingEncoding,
    grad_mu: &Array2<f64>,
    grad_log_std: &Array2<f64>,
    grad_norm: Option<&[f64]>,
    grads: &mut ParamStore,
) -> Result<()> {
    let top = enc.acts.last().expect("input");
    let mut g_top = Array2::zeros(top.raw_dim());
    for (head, g) in [(&layout.collab_mu, grad_mu), (&layout.collab_logstd, grad_log_std)] {
        let acts = [top.clone(), Array2::zeros(g.raw_dim())];
        g_top += &stack_backward(p, std::slice::from_ref(head), &acts, g.clone(), false, Some(grads))?;
    }
    let g_first = stack_backward(p, &layout.collab_hidden, &enc.acts, g_top, false, Some(grads))?;

    let mut g_hidden = if config.channel.normalizes_input() {
        g_first
    } else {
        let dir = enc.direction();
        let mut gh = Array2::zeros(dir.raw_dim());
        for u in 0..rows.len() {
            if enc.norm[u] == 0.0 {
                continue;
            }
            let d = dir.row(u);
            let g = g_first.row(u);
            let proj = d.dot(&g);
            let mut out = gh.row_mut(u);
            Zip::from(&mut out)
                .and(&d)
                .and(&g)
                .for_each(|o, &di, &gi| *o = (gi - di * proj) / enc.norm[u]);
            if let Some(gn) = grad_norm {
                out.scaled_add(gn[u], &d);
            }
        }
        gh
    };
    for (u, &e) in enc.empty.iter().enumerate() {
        if e {
            g_hidden.row_mut(u).fill(0.0);
        }
    }
    let pre = preactivation_grad(enc.hidden.view(), layout.embed.activation, g_hidden.view())?;
    let mut gw = std::mem::take(grads.get_mut(layout.embed.weight));
    let mut gb: Array1<f64> = Array1::zeros(pre.ncols());
    sparse_affine_backward(
        rows,
        Some(&enc.scales),
        pre.view(),
        Activation::Identity,
        pre.view(),
        &mut gw,
        &mut gb,
    )?;
    *grads.get_mut(layout.embed.weight) = gw;
    let mut b = grads.get_mut(layout.embed.bias).row_mut(0);
    b += &gb;
    if let (Some(wx), Some(x)) = (layout.embed_features, features) {
        *grads.get_mut(wx) += &x.t().dot(&pre);
    }
    Ok(())
}

/// Bandwidth `α = sigmoid(BN(‖h_b‖)·w + b)` with its logit and normalized
/// norm. In training mode the batch statistics are returned so the caller can
/// fold them into the running averages.
#[derive(Debug, Clone)]
pub struct Bandwidth {
    pub normalized: Vec<f64>,
    pub logit: Vec<f64>,
    pub alpha: Vec<f64>,
    pub stats: Option<crate::tensor::BatchStats>,
}

pub fn infer_bandwidth(
    norms: &[f64],
    empty: &[bool],
    bn: &ScalarBatchNorm,
    head: (f64, f64),
    training: bool,
) -> Result<Bandwidth> {
    let (w, b) = head;
    let (mut normalized, stats) = if training {
        let (y, s) = bn.normalize_batch(norms)?;
        (y, Some(s))
    } else {
        (bn.normalize_running(norms), None)
    };
    for (x, &e) in normalized.iter_mut().zip(empty) {
        if e {
            *x = 0.0;
        }
    }
    let logit: Vec<f64> = normalized.iter().map(|x| x * w + b).collect();
    let alpha = logit.iter().map(|&s| sigmoid(s)).collect();
    Ok(Bandwidth {
        normalized,
        logit,
        alpha,
        stats,
    })
}

/// Feature inference network output.
#[derive(Debug, Clone)]
pub struct FeatureEncoding {
    pub acts: Vec<Array2<f64>>,
    pub mu: Array2<f64>,
    pub log_std: Array2<f64>,
}

pub fn encode_features(layout: &Layout, p: &ParamStore, x: ArrayView2<f64>) -> Result<FeatureEncoding> {
    if x.ncols() != layout.n_features {
        return Err(Error::dimension("feature width", layout.n_features, x.ncols()));
    }
    let acts = stack_forward(p, &layout.feature_hidden, x.to_owned(), false)?;
    let top = acts.last().expect("input");
    let mu = affine_forward(top.view(), p.get(layout.feature_mu.weight).view(), bias(p, &layout.feature_mu), Activation::Identity)?;
    let log_std = affine_forward(
        top.view(),
        p.get(layout.feature_logstd.weight).view(),
        bias(p, &layout.feature_logstd),
        Activation::Identity,
    )?;
    Ok(FeatureEncoding { acts, mu, log_std })
}

/// `v = z_b + d·z_t`.
pub fn fuse(z_b: &[f64], z_t: &[f64], d: f64) -> Result<Vec<f64>> {
    if z_b.len() != z_t.len() {
        return Err(Error::dimension("fused embedding", z_b.len(), z_t.len()));
    }
    Ok(z_b.iter().zip(z_t).map(|(b, t)| b + d * t).collect())
}

/// Row-wise [`fuse`] with one channel value per row.
pub(crate) fn fuse_rows(z_b: &Array2<f64>, z_t: Option<&Array2<f64>>, d: &[f64]) -> Array2<f64> {
    let mut v = z_b.clone();
    if let Some(z_t) = z_t {
        for (u, mut row) in v.rows_mut().into_iter().enumerate() {
            row.scaled_add(d[u], &z_t.row(u));
        }
    }
    v
}

/// Rating generation network; returns all activations, the last being the
/// item logits.
pub fn decode_ratings(layout: &Layout, p: &ParamStore, v: Array2<f64>) -> Result<Vec<Array2<f64>>> {
    stack_forward(p, &layout.decoder, v, false)
}

/// `Σ_{j ∈ row} log softmax(logits)_j` per user, with the gradient of the
/// negative sum with respect to the logits.
pub fn multinomial_log_likelihood(
    logits: ArrayView2<f64>,
    targets: &[&[usize]],
) -> Result<(Vec<f64>, Array2<f64>)> {
    let logp = softmax_logprob(logits)?;
    let mut ll = vec![0.0; targets.len()];
    let mut grad = logp.mapv(f64::exp);
    for (u, row) in targets.iter().enumerate() {
        let n = row.len() as f64;
        grad.row_mut(u).mapv_inplace(|p| p * n);
        for &j in row.iter() {
            ll[u] += logp[[u, j]];
            grad[[u, j]] -= 1.0;
        }
    }
    Ok((ll, grad))
}

/// Feature generation network run on `z_t`: the inference weights transposed
/// in reverse order.
pub fn decode_features(layout: &Layout, p: &ParamStore, z_t: Array2<f64>) -> Result<Vec<Array2<f64>>> {
    stack_forward(p, &layout.feature_decoder(), z_t, true)
}

/// `Σ_s [x ln x̂ + (1 − x) ln(1 − x̂)]` per row with `x̂` clamped, and the
/// gradient of the negative sum with respect to `x̂` (zero where clamped).
pub fn bernoulli_log_likelihood(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
    let mut ll = vec![0.0; x.nrows()];
    let mut grad = Array2::zeros(x.raw_dim());
    for u in 0..x.nrows() {
        for s in 0..x.ncols() {
            let t = x[[u, s]];
            let raw = x_hat[[u, s]];
            let q = raw.clamp(FEATURE_PROB_CLAMP, 1.0 - FEATURE_PROB_CLAMP);
            ll[u] += t * q.ln() + (1.0 - t) * (1.0 - q).ln();
            if q == raw {
                grad[[u, s]] = -t / q + (1.0 - t) / (1.0 - q);
            }
        }
    }
    (ll, grad)
}

/// `−(λ/2)‖x − x̂‖²` per row and the gradient of its negation.
pub fn gaussian_log_likelihood(x: ArrayView2<f64>, x_hat: ArrayView2<f64>, precision: f64) -> (Vec<f64>, Array2<f64>) {
    let diff = &x_hat - &x;
    let ll = diff.rows().into_iter().map(|r| -0.5 * precision * r.dot(&r)).collect();
    (ll, diff * precision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ChannelKind;
    use ndarray::array;

    fn small(kind: ChannelKind) -> (VbaeConfig, Layout, ParamStore) {
        let config = VbaeConfig {
            channel: kind,
            collab_hidden: vec![6],
            feature_hidden: vec![5],
            latent_dim: 3,
            ..VbaeConfig::default()
        };
        let (layout, p) = Layout::build(&config, 8, 4).unwrap();
        (config, layout, p)
    }

    #[test]
    fn singleton_row_selects_weight_row() {
        let (c, l, mut p) = small(ChannelKind::Soft);
        p.get_mut(l.embed.bias).fill(0.25);
        let enc = encode_ratings(&c, &l, &p, &[&[5]], 1.0, None).unwrap();
        let expected = &p.get(l.embed.weight).row(5) + 0.25;
        assert_eq!(enc.hidden.row(0), expected);
        let d = enc.direction().row(0);
        assert!((d.dot(&d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_rows_encode_identically() {
        let (c, l, p) = small(ChannelKind::Soft);
        let enc = encode_ratings(&c, &l, &p, &[&[1, 2], &[1, 2]], 1.0, None).unwrap();
        assert_eq!(enc.mu.row(0), enc.mu.row(1));
        assert_eq!(enc.norm[0], enc.norm[1]);
    }

    #[test]
    fn empty_row_falls_back_to_prior() {
        let (c, l, p) = small(ChannelKind::Soft);
        let enc = encode_ratings(&c, &l, &p, &[&[], &[3]], 1.0, None).unwrap();
        assert_eq!(enc.norm[0], 0.0);
        assert!(enc.direction().row(0).iter().all(|&x| x == 0.0));
        assert!(enc.mu.row(0).iter().all(|&x| x == 0.0));
        let bw = infer_bandwidth(&enc.norm, &enc.empty, &ScalarBatchNorm::default(), (2.0, 0.3), false).unwrap();
        assert_eq!(bw.alpha[0], sigmoid(0.3));
    }

    #[test]
    fn bandwidth_examples() {
        let bn = ScalarBatchNorm::default();
        let bw = infer_bandwidth(&[0.0], &[false], &bn, (1.0, 0.0), false).unwrap();
        assert!((bw.alpha[0] - 0.5).abs() < 1e-12);
        let norms = [0.1, 0.5, 0.9, 1.3];
        let bw = infer_bandwidth(&norms, &[false; 4], &bn, (2.0, 0.0), true).unwrap();
        assert!(bw.alpha.windows(2).all(|w| w[0] < w[1]));
        let bw = infer_bandwidth(&norms, &[false; 4], &bn, (-2.0, 0.0), true).unwrap();
        assert!(bw.alpha.windows(2).all(|w| w[0] > w[1]));
        assert!(infer_bandwidth(&[1.0], &[false], &bn, (1.0, 0.0), true).is_err());
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse(&[1.0, 0.0], &[0.0, 2.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert_eq!(fuse(&[1.0, -2.0], &[3.0, 4.0], 0.0).unwrap(), vec![1.0, -2.0]);
        assert_eq!(fuse(&[1.0, -2.0], &[3.0, 4.0], 1.0).unwrap(), vec![4.0, 2.0]);
        assert!(fuse(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn features_zero_row_and_duplicates() {
        let (_, l, p) = small(ChannelKind::Soft);
        let x = Array2::zeros((2, 4));
        let a = encode_features(&l, &p, x.view()).unwrap();
        assert_eq!(a.mu.row(0), a.mu.row(1));
        let x = array![[0.2, 0.0, 1.0, 0.5], [0.2, 0.0, 1.0, 0.5]];
        let b = encode_features(&l, &p, x.view()).unwrap();
        assert_eq!(b.log_std.row(0), b.log_std.row(1));
    }

    #[test]
    fn multinomial_uniform_logits() {
        let logits = Array2::zeros((1, 5));
        let (ll, _) = multinomial_log_likelihood(logits.view(), &[&[2]]).unwrap();
        assert!((ll[0] - (1.0f64 / 5.0).ln()).abs() < 1e-12);
        let shifted = Array2::from_elem((1, 5), 7.5);
        let (ll2, _) = multinomial_log_likelihood(shifted.view(), &[&[2]]).unwrap();
        assert!((ll[0] - ll2[0]).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_matches_direct_sum() {
        let x = array![[0.0, 0.3, 1.0], [1.0, 0.5, 0.0]];
        let q = array![[0.1, 0.4, 0.9], [0.7, 0.5, 0.2]];
        let (ll, _) = bernoulli_log_likelihood(x.view(), q.view());
        for u in 0..2 {
            let mut oracle = 0.0;
            for s in 0..3 {
                oracle += x[[u, s]] * q[[u, s]].ln() + (1.0 - x[[u, s]]) * (1.0 - q[[u, s]]).ln();
            }
            assert_eq!(ll[u], oracle);
        }
        let b = array![[0.0, 1.0, 1.0]];
        let (perfect, _) = bernoulli_log_likelihood(b.view(), b.view());
        assert!(perfect[0] < 0.0 && perfect[0] > -1e-5);
        let zeros = Array2::zeros((1, 3));
        let near = Array2::from_elem((1, 3), 1e-12);
        let (ll0, g) = bernoulli_log_likelihood(zeros.view(), near.view());
        assert!(ll0[0].abs() < 1e-6);
        assert!(g.iter().all(|&v| v == 0.0));
    }
}
