//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. The synthetic benchmark trains twenty
//! desk-sized models and dominates the runtime (tens of minutes).

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{gradient_mismatches, input, jitter, objective_value, random_frames, tiny_config};
use discvae::discvae::Discvae;
use discvae::dist::{self, CategoricalPosterior, DiagGaussian};
use discvae::evaluation::{evaluate, forecast_mse, ForecastMse};
use discvae::model::{AnyModel, ModelConfig, ModelKind};
use discvae::seq::{self, ObjectiveForm, ObjectiveOptions, Sampling};
use discvae::synth::geometry::{integrate_commands, raycast, Pose, Segment, WorldMap, ROBOT_RADIUS, TICK_SECONDS};
use discvae::synth::labels::{threat_score, SAFE_DISTANCE};
use discvae::synth::{generate_dataset, Dataset, DatasetConfig};
use discvae::training::{history_table, train, TrainConfig};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn elbo_identity() -> Outcome {
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut r = rng(1000 + trial);
        let kind = if trial % 2 == 0 { ModelKind::Discvae } else { ModelKind::Gmvae };
        let k = r.random_range(1..=13usize);
        let mut cfg = tiny_config(kind, k);
        cfg.beams = r.random_range(2..=6);
        let model = AnyModel::new(&cfg, &mut r).unwrap();
        let n = r.random_range(1..=6);
        let t = r.random_range(2..=6);
        let inp = input(random_frames(&mut r, n, t, cfg.beams));
        let opts = if trial % 3 == 0 {
            ObjectiveOptions::evaluation()
        } else {
            ObjectiveOptions::training(r.random_range(0.1..1.0))
        };
        let kl = ObjectiveOptions {
            form: ObjectiveForm::UniformKl,
            ..opts
        };
        let diff = objective_value(&model, &inp, opts, trial) - objective_value(&model, &inp, kl, trial);
        worst = worst.max((diff - (k as f64).ln()).abs());
    }
    (worst < 1e-5, format!("100 trials, worst deviation from log K {worst:.2e}"))
}

fn gradients() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for (i, kind) in [ModelKind::Discvae, ModelKind::Gmvae, ModelKind::Vrnn].into_iter().enumerate() {
        let mut model = AnyModel::new(&tiny_config(kind, 2), &mut rng(40 + i as u64)).unwrap();
        jitter(&mut model, 50 + i as u64, 0.1);
        let inp = input(random_frames(&mut rng(60 + i as u64), 2, 3, 2));
        let (checked, bad) =
            gradient_mismatches(&model, &inp, ObjectiveOptions::training(0.7), 70 + i as u64, 1e-4, 1e-3, 1e-7);
        ok &= bad.is_empty();
        details.push(format!("{kind} {}/{checked} off", bad.len()));
    }
    (ok, details.join(", "))
}

fn normal_vec(r: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    seq::normal_rows(r, 1, d).row(0).to_owned()
}

fn log_normal(x: &Array1<f64>, mean: &Array1<f64>, log_var: &Array1<f64>) -> f64 {
    (0..x.len())
        .map(|i| {
            let var = log_var[i].exp();
            -0.5 * (2.0 * PI * var).ln() - (x[i] - mean[i]).powi(2) / (2.0 * var)
        })
        .sum()
}

fn primitives() -> Outcome {
    let mut r = rng(3);
    let mut worst_kl = 0.0f64;
    for _ in 0..20 {
        let d = 4;
        let (mq, mp) = (normal_vec(&mut r, d), normal_vec(&mut r, d));
        let lq = Array1::from_shape_fn(d, |_| r.random_range(-1.0..1.0));
        let lp = Array1::from_shape_fn(d, |_| r.random_range(-1.0..1.0));
        let closed = dist::kl_diag_gaussians(
            &DiagGaussian::new(mq.clone(), lq.clone()).unwrap(),
            &DiagGaussian::new(mp.clone(), lp.clone()).unwrap(),
        )
        .unwrap();
        let sd = lq.mapv(|v| (0.5 * v).exp());
        let samples = 1_000_000;
        let mut total = 0.0;
        for _ in 0..samples {
            let x = &mq + &(&sd * &normal_vec(&mut r, d));
            total += log_normal(&x, &mq, &lq) - log_normal(&x, &mp, &lp);
        }
        let mc = total / samples as f64;
        worst_kl = worst_kl.max((mc - closed).abs() / closed);
    }
    let logits = Array1::from(vec![1.2, -0.3, 0.5, 0.0, -1.5]);
    let c = CategoricalPosterior::new(logits.clone()).unwrap();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let draws = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..draws {
        let u = Array1::from_shape_fn(5, |_| r.random_range(f64::MIN_POSITIVE..1.0));
        let s = dist::gumbel_softmax_sample(&c, 0.1, &u).unwrap();
        counts[discvae::nn::argmax(s.probs.view())] += 1;
    }
    let worst_freq = (0..5)
        .map(|k| (counts[k] as f64 / draws as f64 - logits[k].exp() / z).abs())
        .fold(0.0, f64::max);
    (
        worst_kl <= 0.01 && worst_freq <= 0.02,
        format!("KL worst relative error {worst_kl:.4}, Gumbel worst frequency gap {worst_freq:.4}"),
    )
}

fn threat() -> Outcome {
    let far = vec![SAFE_DISTANCE + ROBOT_RADIUS + 1.0; 72];
    let touching = vec![ROBOT_RADIUS; 72];
    let halfway = vec![ROBOT_RADIUS + SAFE_DISTANCE / 2.0; 72];
    let cases = [
        threat_score(&far, ROBOT_RADIUS, SAFE_DISTANCE),
        threat_score(&touching, ROBOT_RADIUS, SAFE_DISTANCE),
        threat_score(&halfway, ROBOT_RADIUS, SAFE_DISTANCE),
    ];
    let analytic = cases[0] == 0.0 && cases[1] == 1.0 && (cases[2] - 0.5).abs() < 1e-12;
    let mut r = rng(4);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = r.random_range(1..80);
        let ranges: Vec<f64> = (0..n).map(|_| r.random_range(0.0..5.0)).collect();
        let s = threat_score(&ranges, ROBOT_RADIUS, SAFE_DISTANCE);
        let mut closer = ranges.clone();
        let j = r.random_range(0..n);
        closer[j] = (closer[j] - r.random_range(0.0..2.0)).max(0.0);
        let s2 = threat_score(&closer, ROBOT_RADIUS, SAFE_DISTANCE);
        if !(0.0..=1.0).contains(&s) || s2 < s {
            violations += 1;
        }
    }
    (
        analytic && violations == 0,
        format!("analytic cases {cases:?}, {violations}/1000 monotonicity violations"),
    )
}

fn crosses(a: (f64, f64), b: (f64, f64), s: &Segment) -> bool {
    let orient = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0);
    orient(s.a, s.b, a) * orient(s.a, s.b, b) <= 0.0 && orient(a, b, s.a) * orient(a, b, s.b) <= 0.0
}

fn marched_range(p: &Pose, bearing: f64, map: &WorldMap, max_range: f64) -> f64 {
    let step = 0.002;
    let edges = map.segments();
    let dir = ((p.theta + bearing).cos(), (p.theta + bearing).sin());
    let mut prev = (p.x, p.y);
    let mut t = 0.0;
    while t < max_range {
        let next_t = t + step;
        let q = (p.x + next_t * dir.0, p.y + next_t * dir.1);
        if !map.is_free(q) || edges.iter().any(|w| crosses(prev, q, w)) {
            return next_t.min(max_range);
        }
        prev = q;
        t = next_t;
    }
    max_range
}

fn raycaster() -> Outcome {
    let mut r = rng(5);
    let (beams, max_range) = (24, 10.0);
    let mut poses = 0;
    let mut worst = 0.0f64;
    for map in WorldMap::all().iter().cycle() {
        if poses == 1000 {
            break;
        }
        let b = map.bounds;
        let p = Pose::new(r.random_range(b.x0..b.x1), r.random_range(b.y0..b.y1), r.random_range(-PI..PI));
        if !map.is_free((p.x, p.y)) || map.clearance((p.x, p.y)) < 0.01 {
            continue;
        }
        poses += 1;
        let scan = raycast(&p, map, beams, max_range).unwrap();
        for (i, &range) in scan.ranges.iter().enumerate() {
            let oracle = marched_range(&p, 2.0 * PI * i as f64 / beams as f64, map, max_range);
            worst = worst.max((range - oracle).abs());
        }
    }
    (worst <= 0.02, format!("1000 poses x {beams} beams, worst gap {worst:.4} m"))
}

struct SeedResult {
    seed: u64,
    train_windows: usize,
    nmi: f64,
    discvae_acc: f64,
    vrnn_acc: f64,
    ratio: (f64, f64),
    seconds: f64,
}

const BENCH_SEEDS: u64 = 10;
const BENCH_EPOCHS: usize = 40;

fn benchmark_seed(seed: u64) -> (SeedResult, AnyModel, Dataset) {
    let start = Instant::now();
    let dataset = generate_dataset(&DatasetConfig {
        seed,
        ..DatasetConfig::default()
    })
    .unwrap();
    let tc = TrainConfig {
        max_epochs: BENCH_EPOCHS,
        seed,
        ..TrainConfig::default()
    };
    let fresh = AnyModel::new(&ModelConfig::desk(ModelKind::Discvae), &mut rng(seed)).unwrap();
    let untrained: ForecastMse = forecast_mse(&fresh, &dataset.test, dataset.test.horizon).unwrap();
    let discvae = train(fresh, &dataset, &tc).unwrap().model;
    let report = evaluate(&discvae, &dataset, 5, vec![seed], String::new()).unwrap();
    let trained = report.forecast.unwrap();
    let vrnn = AnyModel::new(&ModelConfig::desk(ModelKind::Vrnn), &mut rng(seed)).unwrap();
    let vrnn = train(vrnn, &dataset, &tc).unwrap().model;
    let vrnn_report = evaluate(&vrnn, &dataset, 5, vec![seed], String::new()).unwrap();
    let result = SeedResult {
        seed,
        train_windows: dataset.train.len(),
        nmi: report.nmi_modes.unwrap(),
        discvae_acc: report.accuracy,
        vrnn_acc: vrnn_report.accuracy,
        ratio: (trained.joystick / untrained.joystick, trained.laser / untrained.laser),
        seconds: start.elapsed().as_secs_f64(),
    };
    (result, discvae, dataset)
}

fn benchmark() -> (Outcome, AnyModel, Dataset) {
    let mut results = Vec::new();
    let mut kept = None;
    for seed in 1..=BENCH_SEEDS {
        let (r, model, dataset) = benchmark_seed(seed);
        println!(
            "  seed {:2}: {} train windows, NMI {:.3}, KNN {:.1}% vs VRNN {:.1}%, forecast ratio joystick {:.3} laser {:.3}, {:.0} s",
            r.seed, r.train_windows, r.nmi, r.discvae_acc, r.vrnn_acc, r.ratio.0, r.ratio.1, r.seconds
        );
        if kept.is_none() {
            kept = Some((model, dataset));
        }
        results.push(r);
    }
    let n = results.len() as f64;
    let mean_nmi = results.iter().map(|r| r.nmi).sum::<f64>() / n;
    let wins = results.iter().filter(|r| r.discvae_acc > r.vrnn_acc).count();
    let ratio_a = results.iter().map(|r| r.ratio.0).sum::<f64>() / n;
    let ratio_l = results.iter().map(|r| r.ratio.1).sum::<f64>() / n;
    let min_windows = results.iter().map(|r| r.train_windows).min().unwrap();
    let slowest = results.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let parts = [
        (min_windows >= 3000, format!("train windows >= {min_windows}")),
        (mean_nmi >= 0.5, format!("(a) mean NMI {mean_nmi:.3}")),
        (wins >= 8, format!("(b) KNN beats VRNN on {wins}/{BENCH_SEEDS} seeds")),
        (
            ratio_a <= 0.5 && ratio_l <= 0.5,
            format!("(c) mean forecast ratio joystick {ratio_a:.3} laser {ratio_l:.3}"),
        ),
        (slowest <= 1800.0, format!("slowest seed {slowest:.0} s")),
    ];
    for (ok, text) in &parts {
        println!("  {} {text}", if *ok { "ok  " } else { "MISS" });
    }
    let ok = parts.iter().all(|p| p.0);
    let detail = parts.iter().map(|p| p.1.clone()).collect::<Vec<_>>().join("; ");
    let (model, dataset) = kept.unwrap();
    ((ok, detail), model, dataset)
}

fn positions(dataset: &Dataset, step_rows: &[Array2<f64>], window: usize) -> Vec<(f64, f64)> {
    let commands: Vec<(f64, f64)> = step_rows
        .iter()
        .map(|j| dataset.stats().denormalize_command(&j.row(window).to_vec()))
        .collect();
    integrate_commands(Pose::new(0.0, 0.0, 0.0), &commands, TICK_SECONDS)
        .unwrap()
        .into_iter()
        .map(|p| (p.x, p.y))
        .collect()
}

fn trajectory_distance(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    a.iter().zip(b).map(|(p, q)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).sum::<f64>() / a.len() as f64
}

fn rollout_contracts(model: &AnyModel, dataset: &Dataset) -> Outcome {
    let AnyModel::Discvae(m) = model else {
        return (false, "benchmark model is not clustered".into());
    };
    let windows: Vec<usize> = (0..20).map(|i| i * dataset.test.len() / 20).collect();
    let prefix = dataset.test.frames(&windows);
    let (k, samples, steps) = (m.components(), 3, 10);
    let mut constant = true;
    let mut seeds_differ = true;
    // trajectories[c][s][w]
    let mut trajectories = vec![Vec::new(); k];
    for (c, per_cluster) in trajectories.iter_mut().enumerate() {
        for s in 0..samples {
            let seed = 7000 + (c * samples + s) as u64;
            let r = m.predict_rollout_with(&prefix, steps, &mut rng(seed), Some(c), Sampling::Random).unwrap();
            constant &= r.steps.iter().all(|st| st.z_global == r.z_global);
            let other = m.predict_rollout_with(&prefix, steps, &mut rng(seed + 1_000_000), Some(c), Sampling::Random).unwrap();
            seeds_differ &= other.z_global != r.z_global && other.steps != r.steps;
            let joystick: Vec<Array2<f64>> = r.steps.iter().map(|st| st.joystick.clone()).collect();
            per_cluster.push((0..windows.len()).map(|w| positions(dataset, &joystick, w)).collect::<Vec<_>>());
        }
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for w in 0..windows.len() {
        for c in 0..k {
            for d in c..k {
                for s in 0..samples {
                    for t in 0..samples {
                        if c == d && t <= s {
                            continue;
                        }
                        let dist = trajectory_distance(&trajectories[c][s][w], &trajectories[d][t][w]);
                        if c == d {
                            intra += dist;
                            n_intra += 1;
                        } else {
                            inter += dist;
                            n_inter += 1;
                        }
                    }
                }
            }
        }
    }
    let (intra, inter) = (intra / n_intra as f64, inter / n_inter as f64);
    (
        constant && seeds_differ && inter > intra,
        format!(
            "z_G constant {constant}, seeds differ {seeds_differ}, mean trajectory distance inter {inter:.4} m vs intra {intra:.4} m"
        ),
    )
}

fn reduction() -> Outcome {
    let mut cfg = tiny_config(ModelKind::Discvae, 1);
    cfg.beams = 6;
    let mut mixture = Discvae::new(cfg.clone(), &mut rng(8)).unwrap();
    let table = mixture.p_global.unwrap();
    *mixture.params.get_mut(table.means_id()) = Array2::zeros((1, cfg.dim_global));
    *mixture.params.get_mut(table.log_vars_id()) = Array2::zeros((1, cfg.dim_global));
    let mut plain = Discvae::new(ModelConfig { kind: ModelKind::Dseqvae, ..cfg }, &mut rng(9)).unwrap();
    for (name, value) in plain.params.names().to_vec().iter().zip(plain.params.values_mut()) {
        *value = mixture.params.get(mixture.params.find(name).unwrap()).clone();
    }
    let mut identical = true;
    for trial in 0..10u64 {
        let frames = random_frames(&mut rng(100 + trial), 4, 5, 6);
        for opts in [ObjectiveOptions::training(0.4), ObjectiveOptions::evaluation()] {
            let a = mixture.elbo(&frames, &mut rng(200 + trial), opts).unwrap();
            let b = plain.elbo(&frames, &mut rng(200 + trial), opts).unwrap();
            identical &= a.objective.to_bits() == b.objective.to_bits();
        }
    }
    (identical, format!("20 objective pairs bit-identical: {identical}"))
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn reproducibility() -> Outcome {
    let run = |dir: &Path| {
        let cfg = DatasetConfig {
            seed: 21,
            beams: 8,
            episodes_per_map: [8, 8, 4],
            ..DatasetConfig::default()
        };
        let dataset = generate_dataset(&cfg).unwrap();
        dataset.save(dir).unwrap();
        let model_cfg = ModelConfig {
            beams: 8,
            ..ModelConfig::desk(ModelKind::Discvae)
        };
        let model = AnyModel::new(&model_cfg, &mut rng(22)).unwrap();
        let tc = TrainConfig {
            max_epochs: 2,
            seed: 23,
            ..TrainConfig::default()
        };
        let out = train(model, &dataset, &tc).unwrap();
        let report = evaluate(&out.model, &dataset, 5, vec![21, 22, 23], String::new()).unwrap();
        (files(dir), history_table(&out.history), serde_json::to_string(&report).unwrap())
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run(a.path());
    let second = run(b.path());
    let blobs = first.0 == second.0 && !first.0.is_empty();
    let history = first.1 == second.1;
    let report = first.2 == second.2;
    (
        blobs && history && report,
        format!("dataset files identical {blobs} ({} files), history identical {history}, report identical {report}", first.0.len()),
    )
}

fn line(n: usize, what: &str, (ok, detail): &Outcome, seconds: f64) -> bool {
    println!("criterion {n} {}: {what}: {detail} [{seconds:.1} s]", if *ok { "PASS" } else { "FAIL" });
    *ok
}

#[test]
fn acceptance() {
    let mut all = true;
    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed().as_secs_f64())
    };
    let (o, s) = timed(&elbo_identity);
    all &= line(1, "objective forms differ by log K", &o, s);
    let (o, s) = timed(&gradients);
    all &= line(2, "gradients match central differences", &o, s);
    let (o, s) = timed(&primitives);
    all &= line(3, "distribution primitives", &o, s);
    let (o, s) = timed(&threat);
    all &= line(4, "threat score", &o, s);
    let (o, s) = timed(&raycaster);
    all &= line(5, "raycaster", &o, s);
    let t = Instant::now();
    let (o, model, dataset) = benchmark();
    all &= line(6, "synthetic benchmark", &o, t.elapsed().as_secs_f64());
    let t = Instant::now();
    let o = rollout_contracts(&model, &dataset);
    all &= line(7, "rollout contracts", &o, t.elapsed().as_secs_f64());
    let (o, s) = timed(&reduction);
    all &= line(8, "single-component reduction", &o, s);
    let (o, s) = timed(&reproducibility);
    all &= line(9, "reproducibility", &o, s);
    assert!(all, "at least one acceptance criterion failed");
}
