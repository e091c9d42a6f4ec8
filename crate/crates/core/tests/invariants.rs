use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;

use vbae::eval::{ndcg_at_m, rank_items, recall_at_m, RankedList};
use vbae::ingest::{make_split, InteractionMatrix};
use vbae::model::infer_bandwidth;
use vbae::stochastic::{
    concrete_from_logit, kl_bernoulli, kl_gaussian_vs_prior, kl_soft_channel, sample_concrete, sample_gaussian,
    sample_logistic_normal, GaussianPosterior, HardChannelPosterior, SoftChannelPosterior,
};
use vbae::tensor::{sigmoid, softmax_logprob, ScalarBatchNorm};

fn matrix() -> impl Strategy<Value = InteractionMatrix> {
    (10usize..40, 5usize..30).prop_flat_map(|(n_users, n_items)| {
        proptest::collection::vec(proptest::collection::vec(0..n_items, 1..12), n_users)
            .prop_map(move |rows| InteractionMatrix::from_rows(n_items, rows).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_terms_are_nonnegative(
        mean in proptest::collection::vec(-5.0f64..5.0, 1..6),
        log_std in -3.0f64..2.0,
        precision in 0.1f64..10.0,
        a in 0.0f64..=1.0,
        p in 0.01f64..0.99,
        sigma in 0.01f64..2.0,
    ) {
        let post = GaussianPosterior { log_std: vec![log_std; mean.len()], mean };
        prop_assert!(kl_gaussian_vs_prior(&post, precision) >= -1e-9);
        prop_assert!(kl_bernoulli(a, p) >= -1e-9);
        let q = SoftChannelPosterior { alpha: a, sigma };
        let prior = SoftChannelPosterior { alpha: p, sigma };
        prop_assert!(kl_soft_channel(&q, &prior) >= -1e-9);
    }

    #[test]
    fn samplers_are_functions_of_their_noise(
        a in 0.01f64..0.99,
        tau in 0.05f64..2.0,
        n1 in -3.0f64..3.0,
        n2 in -3.0f64..3.0,
    ) {
        let post = GaussianPosterior { mean: vec![a, -a], log_std: vec![0.1, -0.2] };
        prop_assert_eq!(sample_gaussian(&post, &[n1, n2]), sample_gaussian(&post, &[n1, n2]));
        let hard = HardChannelPosterior { alpha: a, temperature: tau };
        let d = sample_concrete(&hard, n1, n2);
        prop_assert_eq!(d.to_bits(), sample_concrete(&hard, n1, n2).to_bits());
        // Strictly inside (0, 1) wherever f64 can represent the sigmoid.
        if ((vbae::tensor::logit(a) + n1 - n2) / tau).abs() < 36.0 {
            prop_assert!(d > 0.0 && d < 1.0);
        }
        let soft = SoftChannelPosterior { alpha: a, sigma: 0.3 };
        prop_assert_eq!(sample_logistic_normal(&soft, n1, n2), sample_logistic_normal(&soft, n1, n2));
    }

    #[test]
    fn soft_channel_mean_is_a_bijection(a in 0.001f64..0.999) {
        let mu1 = vbae::stochastic::bandwidth_to_logistic_normal(a, 0.1).mu1;
        prop_assert!((sigmoid(2.0 * mu1) - a).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_is_a_distribution(
        logits in proptest::collection::vec(-300.0f64..300.0, 1..40),
    ) {
        let n = logits.len();
        let lp = softmax_logprob(Array2::from_shape_vec((1, n), logits).unwrap().view()).unwrap();
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        prop_assert!(lp.iter().all(|l| l.exp() >= 0.0));
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn metrics_ignore_order_below_the_cutoff(
        scores in proptest::collection::vec(0.0f64..1.0, 12..60),
        m in 1usize..10,
        seed in any::<u64>(),
    ) {
        let j = scores.len();
        let ranked = rank_items(Array1::from(scores).view(), &[], j);
        let heldout: Vec<usize> = (0..j).filter(|i| (i ^ seed as usize).is_multiple_of(3)).collect();
        prop_assume!(!heldout.is_empty());
        let mut shuffled = ranked.clone();
        let tail = &mut shuffled[m..];
        tail.rotate_left((seed % tail.len().max(1) as u64) as usize);
        tail.reverse();
        let a = RankedList { user: 0, ranked_items: ranked, heldout: heldout.clone() };
        let b = RankedList { user: 0, ranked_items: shuffled, heldout };
        prop_assert_eq!(recall_at_m(&a, m), recall_at_m(&b, m));
        prop_assert_eq!(ndcg_at_m(&a, m), ndcg_at_m(&b, m));
    }

    #[test]
    fn splits_are_deterministic_and_never_leak(inter in matrix(), seed in any::<u64>()) {
        let split = make_split(&inter, seed).unwrap();
        prop_assert_eq!(&split, &make_split(&inter, seed).unwrap());
        split.validate(&inter).unwrap();
        let observed = split.observed_rows(&inter);
        for (u, held) in &split.heldout {
            prop_assert!(held.iter().all(|i| !observed[*u].contains(i)));
            prop_assert_eq!(observed[*u].len() + held.len(), inter.row(*u).len());
        }
        for &u in &split.train_users {
            prop_assert!(!split.heldout.contains_key(&u));
            prop_assert_eq!(&observed[u], &inter.row(u).to_vec());
        }
    }

    #[test]
    fn bandwidth_falls_with_norm_for_negative_weight(
        mut norms in proptest::collection::vec(0.0f64..20.0, 2..30),
        w in -5.0f64..-0.01,
        b in -3.0f64..3.0,
    ) {
        norms.sort_by(f64::total_cmp);
        let empty = vec![false; norms.len()];
        let bn = ScalarBatchNorm { running_mean: 3.0, running_var: 4.0, ..ScalarBatchNorm::default() };
        let bw = infer_bandwidth(&norms, &empty, &bn, (w, b), false).unwrap();
        prop_assert!(bw.alpha.windows(2).all(|p| p[1] <= p[0]));
    }
}

#[test]
fn concrete_concentrates_as_temperature_falls() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let noise: Vec<(f64, f64)> = (0..20_000)
        .map(|_| (vbae::stochastic::gumbel(&mut rng), vbae::stochastic::gumbel(&mut rng)))
        .collect();
    for alpha in [0.2, 0.5, 0.7] {
        let s = vbae::tensor::logit(alpha);
        let spread: Vec<usize> = [1.0, 0.5, 0.1]
            .iter()
            .map(|&tau| {
                noise
                    .iter()
                    .map(|&(g1, g2)| concrete_from_logit(s, g1, g2, tau))
                    .filter(|d| d.min(1.0 - d) > 0.1)
                    .count()
            })
            .collect();
        assert!(spread.windows(2).all(|w| w[1] <= w[0]), "{alpha}: {spread:?}");
    }
}
