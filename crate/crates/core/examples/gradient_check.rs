//! Finite-difference check of both alternating steps for every channel
//! variant on a small random batch.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vbae::model::{b_step_loss, t_step_loss, Batch, ChannelKind, StepNoise, StepSettings, Vbae, VbaeConfig};
use vbae::stochastic::{NoiseSource, NoiseStream};
use vbae::tensor::{finite_diff_check, GradCheckConfig, ParamStore};

fn main() -> vbae::Result<()> {
    let (users, items, features) = (16, 25, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Vec<usize>> = (0..users)
        .map(|_| {
            let mut r: Vec<usize> = (0..rng.random_range(1..7)).map(|_| rng.random_range(0..items)).collect();
            r.sort_unstable();
            r.dedup();
            r
        })
        .collect();
    let x = Array2::from_shape_simple_fn((users, features), || f64::from(rng.random::<f64>() < 0.3));
    let batch = Batch::new((0..users).collect(), rows, x);
    let ids: Vec<usize> = (0..users).collect();
    let settings = StepSettings::new(0.2, 0.5);

    for kind in ChannelKind::ALL {
        let config = VbaeConfig {
            channel: kind,
            collab_hidden: vec![8],
            feature_hidden: vec![6],
            latent_dim: 3,
            ..VbaeConfig::default()
        };
        let mut model = Vbae::new(config, items, features)?;
        let layout = model.layout().clone();
        let config = model.config().clone();
        let steps: &[bool] = if kind.is_fused() { &[false, true] } else { &[false] };
        for &t_step in steps {
            let (stream, blocks) = if t_step {
                (NoiseStream::Feature, layout.feature_blocks())
            } else {
                (NoiseStream::Collaborative, layout.collaborative_blocks())
            };
            let noise = StepNoise::draw(&NoiseSource::new(7), stream, 0, &ids, 3, kind);
            let loss = |p: &ParamStore| {
                let out = if t_step {
                    t_step_loss(&config, &layout, p, &batch, &noise, settings)
                } else {
                    b_step_loss(&config, &layout, p, &batch, &noise, settings)
                };
                out.expect("finite loss")
            };
            let grads = loss(model.params()).grads;
            let report = finite_diff_check(model.params_mut(), &grads, &blocks, GradCheckConfig::default(), |p| {
                loss(p).parts.total
            });
            let step = if t_step { "t-step" } else { "b-step" };
            println!("{:<16} {step}  max rel error {:.2e}", kind.name(), report.max_rel_error());
        }
    }
    Ok(())
}
