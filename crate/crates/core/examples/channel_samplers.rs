//! Monte Carlo estimates of each channel's KL term next to the closed form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vbae::stochastic::{
    gumbel, kl_bernoulli, kl_soft_channel, sample_concrete, sample_logistic_normal, HardChannelPosterior,
    SoftChannelPosterior,
};

const N: usize = 200_000;

fn ln_normal(x: f64, m: f64, s: f64) -> f64 {
    -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let (a, p) = (0.8, 0.3);
    let hits = (0..N)
        .filter(|_| {
            let post = HardChannelPosterior { alpha: a, temperature: 0.1 };
            sample_concrete(&post, gumbel(&mut rng), gumbel(&mut rng)) > 0.5
        })
        .count();
    println!("concrete  P(d > 0.5) = {:.4}  alpha = {a}", hits as f64 / N as f64);
    println!("bernoulli KL({a} || {p}) = {:.5}", kl_bernoulli(a, p));

    for (a, b, sigma) in [(0.3, 0.5, 0.7), (0.8, 0.4, 0.1)] {
        let q = SoftChannelPosterior { alpha: a, sigma };
        let prior = SoftChannelPosterior { alpha: b, sigma };
        let (mq, sq) = (q.logit_mean(), q.logit_std());
        let (mp, sp) = (prior.logit_mean(), prior.logit_std());
        let mut acc = 0.0;
        let mut inside = 0.0;
        for _ in 0..N {
            let d = sample_logistic_normal(&q, rng.sample(StandardNormal), rng.sample(StandardNormal));
            inside += d;
            let l = vbae::tensor::logit(d);
            acc += ln_normal(l, mq, sq) - ln_normal(l, mp, sp);
        }
        println!(
            "soft      KL({a} || {b}, sigma {sigma}): mc {:.5}  exact {:.5}  mean d {:.3}",
            acc / N as f64,
            kl_soft_channel(&q, &prior),
            inside / N as f64
        );
    }
}
