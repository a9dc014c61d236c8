mod common;

use discvae::evaluation::nmi;
use discvae::gmvae::{Gmvae, GmvaeConfig};
use discvae::graph::Graph;
use discvae::model::{ModelInput, Trainable};
use discvae::seq::{self, ObjectiveForm, ObjectiveOptions, ObjectiveVars};
use discvae::synth::Frames;
use discvae::training::{Adam, TrainConfig};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(input_dim: usize, hidden: usize, clusters: usize, dim_z: usize, seed: u64) -> Gmvae {
    let cfg = GmvaeConfig {
        input_dim,
        hidden,
        clusters,
        dim_z,
    };
    Gmvae::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_x(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    seq::normal_rows(rng, n, d)
}

/// Two 2-D Gaussian blobs at (±3, 0) with unit-free spread 0.5; labels 0/1.
fn two_blobs(rng: &mut ChaCha8Rng, n: usize) -> (Array2<f64>, Vec<usize>) {
    let noise = seq::normal_rows(rng, n, 2);
    let mut x = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.random_range(0..2usize);
        let centre = if c == 0 { -3.0 } else { 3.0 };
        x[[i, 0]] = centre + 0.5 * noise[[i, 0]];
        x[[i, 1]] = 0.5 * noise[[i, 1]];
        labels.push(c);
    }
    (x, labels)
}

fn record(m: &Gmvae, x: &Array2<f64>, seed: u64, opts: ObjectiveOptions) -> (Graph, ObjectiveVars) {
    let noise = m.noise(&mut ChaCha8Rng::seed_from_u64(seed), x.nrows());
    let mut g = Graph::with_params(&m.params);
    let vars = m.record(&mut g, x, &noise, opts).unwrap();
    (g, vars)
}

#[test]
fn inference_shapes_and_determinism() {
    let m = model(5, 8, 4, 3, 1);
    let x = Array1::from(vec![0.1, -0.2, 0.3, 1.0, 0.0]);
    let a = m.infer(&x, 0.7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = m.infer(&x, 0.7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a.q_y.logits.len(), 4);
    assert_eq!(a.z.len(), 3);
    assert_eq!(a.q_y.logits, b.q_y.logits);
    assert_eq!(a.y.probs, b.y.probs);
    assert_eq!(a.z, b.z);
    assert!((a.y.probs.sum() - 1.0).abs() < 1e-9);
}

#[test]
fn fresh_posteriors_are_near_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = 13;
    let m = model(74, 64, k, 16, 3);
    let x = random_x(&mut rng, 256, 74);
    let logits = m.logits(&x).unwrap();
    let mean_h = logits
        .rows()
        .into_iter()
        .map(|l| discvae::dist::categorical_entropy(&discvae::dist::CategoricalPosterior::new(l.to_owned()).unwrap()))
        .sum::<f64>()
        / 256.0;
    assert!(mean_h > 0.9 * (k as f64).ln(), "mean entropy {mean_h}");
}

#[test]
fn generation_is_deterministic_and_checks_one_hot() {
    let m = model(3, 6, 3, 2, 4);
    let y = Array1::from(vec![0.0, 1.0, 0.0]);
    let a = m.generate(&y, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = m.generate(&y, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    for bad in [vec![0.5, 0.5, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 0.0], vec![1.0, 0.0]] {
        assert!(m.generate(&Array1::from(bad), &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }
}

#[test]
fn separated_components_give_separated_latents() {
    let mut m = model(2, 4, 2, 2, 6);
    let means = m.prior_z.means_id();
    let log_vars = m.prior_z.log_vars_id();
    *m.params.get_mut(means) = Array2::from_shape_vec((2, 2), vec![-5.0, 0.0, 5.0, 0.0]).unwrap();
    *m.params.get_mut(log_vars) = Array2::zeros((2, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut centres = [Array1::<f64>::zeros(2), Array1::<f64>::zeros(2)];
    let n = 2000;
    for (c, centre) in centres.iter_mut().enumerate() {
        let mut y = Array1::zeros(2);
        y[c] = 1.0;
        for _ in 0..n {
            let (z, _) = m.generate_with_latent(&y, &mut rng).unwrap();
            *centre += &(z / n as f64);
        }
    }
    let gap = (&centres[0] - &centres[1]).mapv(|v| v * v).sum().sqrt();
    assert!(gap > 5.0, "gap {gap}");
}

#[test]
fn single_component_generation_follows_its_prior() {
    let mut m = model(2, 4, 1, 2, 8);
    let means = m.prior_z.means_id();
    let log_vars = m.prior_z.log_vars_id();
    *m.params.get_mut(means) = Array2::zeros((1, 2));
    *m.params.get_mut(log_vars) = Array2::zeros((1, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 20_000;
    let zs: Vec<Array1<f64>> = (0..n)
        .map(|_| m.generate_with_latent(&Array1::from(vec![1.0]), &mut rng).unwrap().0)
        .collect();
    for j in 0..2 {
        let mean = zs.iter().map(|z| z[j]).sum::<f64>() / n as f64;
        let var = zs.iter().map(|z| (z[j] - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.04, "variance {var}");
    }
}

#[test]
fn entropy_and_uniform_kl_forms_differ_by_log_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for trial in 0..20u64 {
        let k = 1 + (trial as usize % 6);
        let d = 2 + (trial as usize % 4);
        let m = model(d, 5, k, 3, trial);
        let x = random_x(&mut rng, 1 + trial as usize, d);
        for opts in [ObjectiveOptions::training(0.6), ObjectiveOptions::evaluation()] {
            let (ga, a) = record(&m, &x, trial, opts);
            let kl_opts = ObjectiveOptions {
                form: ObjectiveForm::UniformKl,
                ..opts
            };
            let (gb, b) = record(&m, &x, trial, kl_opts);
            let diff = ga.scalar(a.objective) - gb.scalar(b.objective);
            assert!((diff - (k as f64).ln()).abs() < 1e-5, "k={k} diff {diff}");
        }
    }
}

#[test]
fn breakdown_ranges_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..10 {
        let m = model(4, 6, 5, 2, seed);
        let x = random_x(&mut rng, 16, 4);
        let b = m.elbo(&x, &mut rng, ObjectiveOptions::training(0.8)).unwrap();
        assert!(b.kl_global >= 0.0);
        assert!(b.entropy >= 0.0 && b.entropy <= 5f64.ln() + 1e-12);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = model(3, 4, 2, 2, 13);
    let x = random_x(&mut rng, 4, 3);
    let input = ModelInput {
        frames: Frames {
            commands: vec![x.slice(ndarray::s![.., 0..2]).to_owned()],
            ranges: vec![x.slice(ndarray::s![.., 2..3]).to_owned()],
        },
        classes: vec![0; 4],
    };
    let (checked, bad) =
        common::gradient_mismatches(&m, &input, ObjectiveOptions::training(0.7), 14, 1e-4, 1e-3, 1e-7);
    assert_eq!(checked, m.params().num_scalars());
    assert!(bad.is_empty(), "{bad:#?}");
}

/// Plain minibatch ascent on the static model; returns per-step objectives.
fn fit(m: &mut Gmvae, x: &Array2<f64>, steps: usize, lr: f64, seed: u64) -> Vec<f64> {
    let cfg = TrainConfig::default();
    let mut adam = Adam::new(m.params.values());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let idx: Vec<usize> = (0..32).map(|_| rng.random_range(0..x.nrows())).collect();
        let batch = x.select(ndarray::Axis(0), &idx);
        let noise = m.noise(&mut rng, batch.nrows());
        let mut g = Graph::with_params(&m.params);
        let vars = m.record(&mut g, &batch, &noise, ObjectiveOptions::training(0.7)).unwrap();
        trace.push(g.scalar(vars.objective));
        let grads = g.backward(vars.objective);
        let n = m.params.len();
        let grads: Vec<Array2<f64>> = grads.grads.into_iter().take(n).collect();
        adam.ascend(m.params.values_mut(), &grads, &cfg, lr);
    }
    trace
}

#[test]
fn objective_rises_in_trend_on_a_two_component_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (x, _) = two_blobs(&mut rng, 1000);
    let mut m = model(2, 16, 2, 2, 16);
    let trace = fit(&mut m, &x, 200, 1e-2, 17);
    let blocks: Vec<f64> = trace.chunks(20).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in blocks.windows(2) {
        assert!(w[1] >= w[0], "block means {blocks:?}");
    }
}

#[test]
fn separated_mixture_is_clustered() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let (x, labels) = two_blobs(&mut rng, 1000);
    let mut m = model(2, 16, 2, 2, 19);
    fit(&mut m, &x, 1500, 1e-2, 20);
    let assigned = m.assign(&x);
    let score = nmi(&assigned, &labels).unwrap();
    assert!(score >= 0.8, "NMI {score}");
}
