use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vbae::model::{Batch, ChannelKind, FeatureLikelihood, StepNoise, StepSettings, Vbae, VbaeConfig};
use vbae::stochastic::{NoiseSource, NoiseStream};
use vbae::tensor::{finite_diff_check, GradCheckConfig};

const USERS: usize = 20;
const ITEMS: usize = 30;
const FEATURES: usize = 16;

fn instance(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<usize>> = (0..USERS)
        .map(|_| {
            let n = rng.random_range(1..8);
            let mut r: Vec<usize> = (0..n).map(|_| rng.random_range(0..ITEMS)).collect();
            r.sort_unstable();
            r.dedup();
            r
        })
        .collect();
    let x = Array2::from_shape_simple_fn((USERS, FEATURES), || {
        if rng.random::<f64>() < 0.4 {
            rng.random::<f64>()
        } else {
            0.0
        }
    });
    let mut batch = Batch::new((0..USERS).collect(), rows, x);
    batch.input_scale = 1.3;
    batch
}

fn model(kind: ChannelKind, likelihood: FeatureLikelihood, lambda_w: f64) -> Vbae {
    let config = VbaeConfig {
        channel: kind,
        collab_hidden: vec![8, 6],
        decoder_hidden: vec![7],
        feature_hidden: vec![9],
        latent_dim: 4,
        lambda_w,
        feature_likelihood: likelihood,
        seed: 11,
        ..VbaeConfig::default()
    };
    let mut m = Vbae::new(config, ITEMS, FEATURES).unwrap();
    // Move the bandwidth head and batch-norm state away from their neutral
    // initial values so every path carries gradient.
    let l = m.layout().clone();
    let p = m.params_mut();
    p.get_mut(l.alpha_weight)[[0, 0]] = -0.7;
    p.get_mut(l.alpha_bias)[[0, 0]] = 0.2;
    p.get_mut(l.bn_state)[[0, 0]] = 1.1;
    p.get_mut(l.bn_state)[[0, 1]] = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for id in l.feature_decoder_bias.iter().chain([&l.embed.bias]) {
        p.get_mut(*id).mapv_inplace(|_| rng.random::<f64>() - 0.5);
    }
    m
}

fn noise(kind: ChannelKind, stream: NoiseStream) -> StepNoise {
    let users: Vec<usize> = (0..USERS).collect();
    StepNoise::draw(&NoiseSource::new(3), stream, 0, &users, 4, kind)
}

fn check(kind: ChannelKind, likelihood: FeatureLikelihood, t_step: bool) {
    for lambda_w in [0.0, 0.05] {
        check_with(kind, likelihood, t_step, lambda_w);
    }
}

fn check_with(kind: ChannelKind, likelihood: FeatureLikelihood, t_step: bool, lambda_w: f64) {
    let mut m = model(kind, likelihood, lambda_w);
    let batch = instance(7);
    let settings = StepSettings::new(0.15, 0.5);
    let (noise, blocks) = if t_step {
        (noise(kind, NoiseStream::Feature), m.layout().feature_blocks())
    } else {
        (noise(kind, NoiseStream::Collaborative), m.layout().collaborative_blocks())
    };
    let step = |m: &Vbae| {
        if t_step {
            m.t_step_loss(&batch, &noise, settings)
        } else {
            m.b_step_loss(&batch, &noise, settings)
        }
    };
    let out = step(&m).unwrap();
    let config = m.config().clone();
    let layout = m.layout().clone();
    let report = finite_diff_check(m.params_mut(), &out.grads, &blocks, GradCheckConfig::default(), |p| {
        let loss = if t_step {
            vbae::model::t_step_loss(&config, &layout, p, &batch, &noise, settings)
        } else {
            vbae::model::b_step_loss(&config, &layout, p, &batch, &noise, settings)
        };
        loss.unwrap().parts.total
    });
    for b in &report.blocks {
        assert!(b.max_rel_error < 1e-3, "{kind} t_step={t_step}: {b:?}");
    }
    if lambda_w == 0.0 && kind.has_bandwidth() && !t_step {
        assert!(out.grads.get(layout.alpha_weight)[[0, 0]].abs() > 1e-6);
        assert!(out.grads.get(layout.embed.weight).iter().any(|g| g.abs() > 1e-6));
    }
}

#[test]
fn b_step_gradients_all_variants() {
    for kind in ChannelKind::ALL {
        check(kind, FeatureLikelihood::Bernoulli, false);
    }
}

#[test]
fn t_step_gradients_fused_variants() {
    for kind in [ChannelKind::Hard, ChannelKind::Soft, ChannelKind::Stop, ChannelKind::Pass] {
        check(kind, FeatureLikelihood::Bernoulli, true);
    }
    check(ChannelKind::Soft, FeatureLikelihood::Gaussian { precision: 2.0 }, true);
}

#[test]
fn steps_touch_only_their_own_tower() {
    let m = model(ChannelKind::Soft, FeatureLikelihood::Bernoulli, 0.05);
    let batch = instance(1);
    let settings = StepSettings::new(0.2, 1.0);
    let b = m.b_step_loss(&batch, &noise(ChannelKind::Soft, NoiseStream::Collaborative), settings).unwrap();
    for id in m.layout().feature_blocks() {
        assert!(b.grads.get(id).iter().all(|&g| g == 0.0), "{}", m.params().name(id));
    }
    let t = m.t_step_loss(&batch, &noise(ChannelKind::Soft, NoiseStream::Feature), settings).unwrap();
    for id in m.layout().collaborative_blocks() {
        assert!(t.grads.get(id).iter().all(|&g| g == 0.0), "{}", m.params().name(id));
    }
}
