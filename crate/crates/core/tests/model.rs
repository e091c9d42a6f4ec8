use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vbae::eval::{evaluate, rank_items, EvalSet};
use vbae::ingest::{make_split, InteractionMatrix, UserFeatureMatrix};
use vbae::model::{
    pretrain_features, train, Batch, ChannelKind, StepNoise, StepSettings, TrainData, Vbae, VbaeConfig,
};
use vbae::stochastic::{NoiseSource, NoiseStream};

const ITEMS: usize = 24;
const FEATURES: usize = 6;

fn small(kind: ChannelKind) -> Vbae {
    let config = VbaeConfig {
        channel: kind,
        collab_hidden: vec![12],
        feature_hidden: vec![8],
        latent_dim: 5,
        seed: 4,
        ..VbaeConfig::default()
    };
    let mut m = Vbae::new(config, ITEMS, FEATURES).unwrap();
    let l = m.layout().clone();
    m.params_mut().get_mut(l.alpha_weight)[[0, 0]] = -0.8;
    m
}

fn batch(n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            let mut r: Vec<usize> = (0..rng.random_range(1..9)).map(|_| rng.random_range(0..ITEMS)).collect();
            r.sort_unstable();
            r.dedup();
            r
        })
        .collect();
    let x = Array2::from_shape_simple_fn((n, FEATURES), || f64::from(rng.random::<f64>() < 0.3));
    Batch::new((0..n).collect(), rows, x)
}

fn noise(n: usize, kind: ChannelKind) -> StepNoise {
    let users: Vec<usize> = (0..n).collect();
    StepNoise::draw(&NoiseSource::new(1), NoiseStream::Collaborative, 0, &users, 5, kind)
}

#[test]
fn fixed_channels_are_forced_soft_channels() {
    let soft = small(ChannelKind::Soft);
    let b = batch(16, 2);
    let settings = StepSettings::new(0.2, 1.0);
    for (kind, d) in [(ChannelKind::Stop, 0.0), (ChannelKind::Pass, 1.0)] {
        let fixed = small(kind);
        assert_eq!(soft.params().num_scalars(), fixed.params().num_scalars());
        let forced = StepSettings { force_channel: Some(d), ..settings };
        let a = soft.b_step_loss(&b, &noise(16, ChannelKind::Soft), forced).unwrap();
        let f = fixed.b_step_loss(&b, &noise(16, kind), settings).unwrap();
        assert_eq!(a.parts.rating_nll.to_bits(), f.parts.rating_nll.to_bits(), "{kind}");
        assert_eq!(a.parts.kl_b.to_bits(), f.parts.kl_b.to_bits(), "{kind}");

        let rows: Vec<&[usize]> = b.inputs.iter().map(Vec::as_slice).collect();
        let users: Vec<usize> = (0..16).collect();
        let s = soft.score(&users, &rows, b.features.view(), Some(&[d; 16])).unwrap();
        let p = fixed.score(&users, &rows, b.features.view(), None).unwrap();
        assert_eq!(s.logits, p.logits, "{kind}");
    }
}

#[test]
fn ranking_ignores_a_logit_shift() {
    let mut m = small(ChannelKind::Soft);
    let b = batch(8, 3);
    let rows: Vec<&[usize]> = b.inputs.iter().map(Vec::as_slice).collect();
    let users: Vec<usize> = (0..8).collect();
    let before = m.score(&users, &rows, b.features.view(), None).unwrap();
    let last = m.layout().decoder.last().unwrap().bias;
    m.params_mut().get_mut(last).mapv_inplace(|x| x + 17.5);
    let after = m.score(&users, &rows, b.features.view(), None).unwrap();
    for (u, row) in rows.iter().enumerate() {
        let r1 = rank_items(before.logits.row(u), row, ITEMS);
        let r2 = rank_items(after.logits.row(u), row, ITEMS);
        assert_eq!(r1, r2);
    }
    assert_eq!(before.alpha, after.alpha);
}

#[test]
fn deterministic_autoencoder_descends() {
    let config = VbaeConfig {
        channel: ChannelKind::CollabOnly,
        collab_hidden: vec![10],
        latent_dim: 4,
        seed: 2,
        ..VbaeConfig::default()
    };
    let mut m = Vbae::new(config, ITEMS, FEATURES).unwrap();
    let b = batch(12, 5);
    let zero = StepNoise::zeros(12, 4);
    let settings = StepSettings::new(0.0, 1.0);
    let blocks = m.layout().collaborative_blocks();
    let mut prev = f64::INFINITY;
    for step in 0..30 {
        let out = m.b_step_loss(&b, &zero, settings).unwrap();
        assert!(out.parts.total < prev, "step {step}: {} after {prev}", out.parts.total);
        prev = out.parts.total;
        for &id in &blocks {
            let g = out.grads.get(id).clone();
            m.params_mut().get_mut(id).scaled_add(-0.01, &g);
        }
    }
}

#[test]
fn pretraining_reduces_reconstruction_error() {
    let config = VbaeConfig {
        batch_size: 10,
        adam: vbae::tensor::AdamConfig { learning_rate: 0.01, ..Default::default() },
        ..small(ChannelKind::Soft).config().clone()
    };
    let mut m = Vbae::new(config, ITEMS, FEATURES).unwrap();
    let (_, x) = clustered(60);
    let x = x.dense_rows(&(0..60).collect::<Vec<_>>());
    let before = m.params().clone();
    let config = m.config().clone();
    let layout = m.layout().clone();
    let none = pretrain_features(&config, &layout, m.params_mut(), &x, 0).unwrap();
    assert!(none.is_empty());
    for id in before.ids() {
        assert_eq!(before.get(id), m.params().get(id));
    }
    let history = pretrain_features(&config, &layout, m.params_mut(), &x, 40).unwrap();
    let first = history.iter().find(|r| r.layer == 0 && r.epoch == 0).unwrap().loss;
    let last = history.iter().filter(|r| r.layer == 0).map(|r| r.loss).next_back().unwrap();
    assert!(last < 0.5 * first, "{first} -> {last}");
}

/// Users who consume all of one of four disjoint item clusters; features
/// name the cluster.
fn clustered(n_users: usize) -> (InteractionMatrix, UserFeatureMatrix) {
    let per = ITEMS / 4;
    let mut rows = Vec::new();
    let mut feats = Vec::new();
    for u in 0..n_users {
        let c = u % 4;
        rows.push((c * per..(c + 1) * per).collect());
        feats.push(vec![(c, 1.0)]);
    }
    (InteractionMatrix::from_rows(ITEMS, rows).unwrap(), UserFeatureMatrix::new(FEATURES, feats).unwrap())
}

#[test]
fn separable_data_is_learned_and_evaluation_is_thread_independent() {
    let (inter, x) = clustered(200);
    let split = make_split(&inter, 0).unwrap();
    let config = VbaeConfig {
        collab_hidden: vec![16],
        feature_hidden: vec![8],
        latent_dim: 4,
        epochs: 15,
        pretrain_epochs: 2,
        batch_size: 20,
        adam: vbae::tensor::AdamConfig { learning_rate: 0.01, ..Default::default() },
        ..VbaeConfig::default()
    };
    let model = Vbae::new(config, ITEMS, FEATURES).unwrap();
    let out = train(model, TrainData { interactions: &inter, split: &split, features: Some(&x) }, None).unwrap();
    assert_eq!(out.history.len(), 15);
    let observed = split.observed_rows(&inter);
    let set = EvalSet { users: &split.test_users, observed: &observed, heldout: &split.heldout, features: Some(&x) };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let (r1, u1) = one.install(|| evaluate(&out.model, set, 3)).unwrap();
    let (r4, u4) = four.install(|| evaluate(&out.model, set, 7)).unwrap();
    assert_eq!(r1, r4);
    assert_eq!(u1, u4);
    assert!(r1.ndcg_100 > 0.9, "{r1:?}");
}
