use discvae::dist::{self, CategoricalPosterior, DiagGaussian, GaussianVars};
use discvae::graph::{Graph, Var};
use discvae::nn::ParamStore;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| {
        let v: f64 = StandardNormal.sample(rng);
        scale * v
    })
}

fn uniform_vec(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| rng.random_range(lo..hi))
}

// Independent log density: sum of univariate normal log densities.
fn log_normal(x: &Array1<f64>, mean: &Array1<f64>, log_var: &Array1<f64>) -> f64 {
    (0..x.len())
        .map(|i| {
            let var = log_var[i].exp();
            -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x[i] - mean[i]).powi(2) / (2.0 * var)
        })
        .sum()
}

#[test]
fn kl_matches_monte_carlo_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for pair in 0..20 {
        let d = 4;
        let (mq, lq) = (normal_vec(&mut rng, d, 1.0), uniform_vec(&mut rng, d, -1.0, 1.0));
        let (mp, lp) = (normal_vec(&mut rng, d, 1.0), uniform_vec(&mut rng, d, -1.0, 1.0));
        let q = DiagGaussian::new(mq.clone(), lq.clone()).unwrap();
        let p = DiagGaussian::new(mp.clone(), lp.clone()).unwrap();
        let closed = dist::kl_diag_gaussians(&q, &p).unwrap();
        let samples = 1_000_000;
        let sd = lq.mapv(|v| (0.5 * v).exp());
        let mut total = 0.0;
        for _ in 0..samples {
            let x = &mq + &(&sd * &normal_vec(&mut rng, d, 1.0));
            total += log_normal(&x, &mq, &lq) - log_normal(&x, &mp, &lp);
        }
        let mc = total / samples as f64;
        assert!(
            (mc - closed).abs() <= 0.01 * closed,
            "pair {pair}: closed {closed} vs Monte-Carlo {mc}"
        );
    }
}

#[test]
fn gumbel_argmax_frequencies_match_categorical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = Array1::from(vec![1.2, -0.3, 0.5, 0.0, -1.5]);
    let c = CategoricalPosterior::new(logits.clone()).unwrap();
    // Exact categorical probabilities, computed directly.
    let e: Vec<f64> = logits.iter().map(|l| f64::exp(*l)).collect();
    let z: f64 = e.iter().sum();
    let exact: Vec<f64> = e.iter().map(|v| v / z).collect();
    let draws = 100_000;
    let mut counts = vec![0usize; 5];
    for _ in 0..draws {
        let u = uniform_vec(&mut rng, 5, f64::MIN_POSITIVE, 1.0);
        let s = dist::gumbel_softmax_sample(&c, 0.1, &u).unwrap();
        counts[discvae::nn::argmax(s.probs.view())] += 1;
    }
    for k in 0..5 {
        let freq = counts[k] as f64 / draws as f64;
        assert!((freq - exact[k]).abs() <= 0.02, "class {k}: {freq} vs {}", exact[k]);
    }
}

#[test]
fn gumbel_large_temperature_tends_to_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = CategoricalPosterior::new(Array1::zeros(4)).unwrap();
    let u = uniform_vec(&mut rng, 4, 0.05, 0.95);
    let s = dist::gumbel_softmax_sample(&c, 1e4, &u).unwrap();
    for p in s.probs.iter() {
        assert!((p - 0.25).abs() < 1e-3);
    }
}

#[test]
fn gumbel_dominant_logit_case() {
    let c = CategoricalPosterior::new(Array1::from(vec![10.0, 0.0, 0.0])).unwrap();
    for u in [[0.5, 0.5, 0.5], [0.2, 0.7, 0.9], [0.3, 0.95, 0.95]] {
        let s = dist::gumbel_softmax_sample(&c, 0.5, &Array1::from(u.to_vec())).unwrap();
        assert!(s.probs[0] > 0.9, "{:?}", s.probs);
    }
}

#[test]
fn gumbel_rejects_non_positive_temperature() {
    let c = CategoricalPosterior::new(Array1::zeros(2)).unwrap();
    let u = Array1::from(vec![0.5, 0.5]);
    assert!(dist::gumbel_softmax_sample(&c, 0.0, &u).is_err());
    assert!(dist::gumbel_softmax_sample(&c, -1.0, &u).is_err());
}

#[test]
fn reparam_moments_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = DiagGaussian::new(Array1::from(vec![1.0]), Array1::from(vec![4f64.ln()])).unwrap();
    let n = 1_000_000;
    let xs: Vec<f64> = (0..n)
        .map(|_| dist::reparam_sample(&g, &normal_vec(&mut rng, 1, 1.0)).unwrap()[0])
        .collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - 1.0).abs() <= 0.01, "mean {mean}");
    assert!((var - 4.0).abs() <= 0.04, "variance {var}");
}

#[test]
fn log_likelihood_matches_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = normal_vec(&mut rng, 360, 1.0);
    let mean = normal_vec(&mut rng, 360, 1.0);
    let mut oracle = 0.0;
    for i in 0..360 {
        oracle += -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * (x[i] - mean[i]).powi(2);
    }
    let ll = dist::gaussian_log_likelihood(&x, &mean, 1.0).unwrap();
    assert!((ll - oracle).abs() < 1e-6);
}

/// Central-difference check of a scalar built from the given parameters.
fn check_scalar_gradient<F>(store: &ParamStore, build: F)
where
    F: Fn(&mut Graph) -> Var,
{
    let value = |s: &ParamStore| {
        let mut g = Graph::with_params(s);
        let out = build(&mut g);
        g.scalar(out)
    };
    let mut g = Graph::with_params(store);
    let out = build(&mut g);
    let grads = g.backward(out);
    let mut probe = store.clone();
    let h = 1e-4;
    for p in 0..store.len() {
        for i in 0..store.values()[p].len() {
            let orig = store.values()[p].as_slice().unwrap()[i];
            probe.values_mut()[p].as_slice_mut().unwrap()[i] = orig + h;
            let up = value(&probe);
            probe.values_mut()[p].as_slice_mut().unwrap()[i] = orig - h;
            let down = value(&probe);
            probe.values_mut()[p].as_slice_mut().unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.grads[p].as_slice().unwrap()[i];
            let diff = (analytic - numeric).abs();
            assert!(
                diff <= 1e-3 * analytic.abs().max(numeric.abs()) || diff < 1e-8,
                "{} [{i}]: analytic {analytic} numeric {numeric}",
                store.names()[p]
            );
        }
    }
}

fn random_store(rng: &mut ChaCha8Rng, shapes: &[(&str, usize, usize)]) -> ParamStore {
    let mut store = ParamStore::new();
    for &(name, r, c) in shapes {
        let v = Array2::from_shape_fn((r, c), |_| {
            let x: f64 = StandardNormal.sample(rng);
            0.7 * x
        });
        store.add(name, v);
    }
    store
}

#[test]
fn reparam_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for d in [1, 3, 8] {
        let store = random_store(&mut rng, &[("mean", 2, d), ("log_var", 2, d)]);
        let eps = random_store(&mut rng, &[("eps", 2, d)]).values()[0].clone();
        let weights = random_store(&mut rng, &[("w", 2, d)]).values()[0].clone();
        check_scalar_gradient(&store, |g| {
            let (m, lv) = (g.param(discvae::nn::ParamId(0)), g.param(discvae::nn::ParamId(1)));
            let q = GaussianVars::new(g, m, lv);
            let e = g.constant(eps.clone());
            let z = dist::reparam(g, q, e);
            let w = g.constant(weights.clone());
            let zw = g.mul(z, w);
            g.sum_all(zw)
        });
    }
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for d in [1, 4, 8] {
        let store = random_store(&mut rng, &[("mq", 3, d), ("lq", 3, d), ("mp", 3, d), ("lp", 3, d)]);
        check_scalar_gradient(&store, |g| {
            let ids: Vec<Var> = (0..4).map(|i| g.param(discvae::nn::ParamId(i))).collect();
            let q = GaussianVars::new(g, ids[0], ids[1]);
            let p = GaussianVars::new(g, ids[2], ids[3]);
            let kl = dist::kl_rows(g, q, p);
            g.sum_all(kl)
        });
    }
}

#[test]
fn entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in [2, 5, 8] {
        let store = random_store(&mut rng, &[("logits", 4, k)]);
        check_scalar_gradient(&store, |g| {
            let l = g.param(discvae::nn::ParamId(0));
            let h = dist::entropy_rows(g, l);
            g.sum_all(h)
        });
    }
}

#[test]
fn kl_is_non_negative_on_many_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let d = rng.random_range(1..6);
        let q = DiagGaussian::new(normal_vec(&mut rng, d, 2.0), normal_vec(&mut rng, d, 2.0)).unwrap();
        let p = DiagGaussian::new(normal_vec(&mut rng, d, 2.0), normal_vec(&mut rng, d, 2.0)).unwrap();
        assert!(dist::kl_diag_gaussians(&q, &p).unwrap() >= 0.0);
    }
}

proptest! {
    #[test]
    fn kl_uniform_is_log_k_minus_entropy(logits in prop::collection::vec(-20.0f64..20.0, 1..16)) {
        let k = logits.len();
        let c = CategoricalPosterior::new(Array1::from(logits)).unwrap();
        let lhs = dist::categorical_kl_uniform(&c);
        let rhs = (k as f64).ln() - dist::categorical_entropy(&c);
        prop_assert!((lhs - rhs).abs() < 1e-6);
    }

    #[test]
    fn entropy_lies_between_zero_and_log_k(logits in prop::collection::vec(-30.0f64..30.0, 1..16)) {
        let k = logits.len();
        let h = dist::categorical_entropy(&CategoricalPosterior::new(Array1::from(logits)).unwrap());
        prop_assert!(h >= 0.0 && h <= (k as f64).ln() + 1e-12);
    }

    #[test]
    fn relaxed_samples_lie_on_the_simplex(
        logits in prop::collection::vec(-30.0f64..30.0, 1..16),
        seed in any::<u64>(),
        tau in 0.01f64..10.0,
    ) {
        let k = logits.len();
        let c = CategoricalPosterior::new(Array1::from(logits)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = uniform_vec(&mut rng, k, f64::MIN_POSITIVE, 1.0);
        let s = dist::gumbel_softmax_sample(&c, tau, &u).unwrap();
        prop_assert!(s.probs.iter().all(|&p| p >= 0.0));
        prop_assert!((s.probs.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero(mean in prop::collection::vec(-5.0f64..5.0, 1..8), lv in -9.0f64..9.0) {
        let d = mean.len();
        let g = DiagGaussian::new(Array1::from(mean), Array1::from_elem(d, lv)).unwrap();
        prop_assert!(dist::kl_diag_gaussians(&g, &g).unwrap().abs() < 1e-12);
    }
}
