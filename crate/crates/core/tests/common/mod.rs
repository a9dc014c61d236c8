#![allow(dead_code)]

use discvae::graph::Graph;
use discvae::model::{ModelConfig, ModelInput, ModelKind, Trainable};
use discvae::seq::{self, ObjectiveOptions};
use discvae::synth::Frames;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// T=3-sized networks: dims 2, two beams, four hidden units.
pub fn tiny_config(kind: ModelKind, k: usize) -> ModelConfig {
    ModelConfig {
        kind,
        beams: 2,
        clusters: k,
        dim_global: 2,
        dim_local: 2,
        hidden: 4,
        global_state: 3,
        local_state: 3,
        joystick_features: 2,
        laser_features: 2,
        classes: 12,
    }
}

pub fn random_frames(rng: &mut ChaCha8Rng, n: usize, t: usize, beams: usize) -> Frames {
    Frames {
        commands: (0..t).map(|_| seq::normal_rows(rng, n, 2)).collect(),
        ranges: (0..t).map(|_| seq::normal_rows(rng, n, beams)).collect(),
    }
}

pub fn input(frames: Frames) -> ModelInput {
    let n = frames.batch_size();
    ModelInput {
        frames,
        classes: (0..n).map(|i| i % 12).collect(),
    }
}

pub fn objective_value<M: Trainable>(model: &M, input: &ModelInput, opts: ObjectiveOptions, seed: u64) -> f64 {
    let mut g = Graph::with_params(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars = model.record_objective(&mut g, input, &mut rng, opts).unwrap();
    g.scalar(vars.objective)
}

#[derive(Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares every reverse-mode partial derivative with a central difference
/// under identical noise draws. Entries pass when the absolute difference is
/// below `rel · max(|a|, |n|)` or below `abs_floor`.
pub fn gradient_mismatches<M: Trainable + Clone>(
    model: &M,
    input: &ModelInput,
    opts: ObjectiveOptions,
    seed: u64,
    step: f64,
    rel: f64,
    abs_floor: f64,
) -> (usize, Vec<Mismatch>) {
    let analytic = {
        let mut g = Graph::with_params(model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vars = model.record_objective(&mut g, input, &mut rng, opts).unwrap();
        let grads = g.backward(vars.objective);
        let n = model.params().len();
        grads.grads.into_iter().take(n).collect::<Vec<_>>()
    };
    let mut probe = model.clone();
    let mut checked = 0;
    let mut bad = Vec::new();
    for p in 0..model.params().len() {
        let len = model.params().values()[p].len();
        for i in 0..len {
            let original = model.params().values()[p].as_slice().unwrap()[i];
            probe.params_mut().values_mut()[p].as_slice_mut().unwrap()[i] = original + step;
            let up = objective_value(&probe, input, opts, seed);
            probe.params_mut().values_mut()[p].as_slice_mut().unwrap()[i] = original - step;
            let down = objective_value(&probe, input, opts, seed);
            probe.params_mut().values_mut()[p].as_slice_mut().unwrap()[i] = original;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[p].as_slice().unwrap()[i];
            let diff = (a - numeric).abs();
            checked += 1;
            if diff > rel * a.abs().max(numeric.abs()) && diff > abs_floor {
                bad.push(Mismatch {
                    param: model.params().names()[p].clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    (checked, bad)
}

/// Adds small Gaussian noise to every parameter so that no ReLU
/// pre-activation sits exactly on its kink (zero states meet zero biases at
/// initialization).
pub fn jitter<M: Trainable>(model: &mut M, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut().values_mut() {
        let (r, c) = p.dim();
        *p += &(seq::normal_rows(&mut rng, r, c) * scale);
    }
}

/// Full-batch Adam ascent on `input`; returns the objective before each step.
pub fn fit<M: Trainable>(model: &mut M, input: &ModelInput, opts: ObjectiveOptions, steps: usize, lr: f64, seed: u64) -> Vec<f64> {
    let cfg = discvae::training::TrainConfig::default();
    let mut adam = discvae::training::Adam::new(model.params().values());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut g = Graph::with_params(model.params());
        let vars = model.record_objective(&mut g, input, &mut rng, opts).unwrap();
        trace.push(g.scalar(vars.objective));
        let n = model.params().len();
        let grads: Vec<_> = g.backward(vars.objective).grads.into_iter().take(n).collect();
        adam.ascend(model.params_mut().values_mut(), &grads, &cfg, lr);
    }
    trace
}
