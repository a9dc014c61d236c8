//! Mini-batch gradient ascent with Adam, exponential step-size decay,
//! temperature annealing, early stopping on the validation objective and a
//! per-epoch history.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::Graph;
use crate::model::{AnyModel, ModelInput, Trainable};
use crate::seq::{Breakdown, ObjectiveOptions};
use crate::synth::{Dataset, SequenceBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative decay applied every `decay_steps` steps, with a
    /// continuous exponent.
    pub decay_rate: f64,
    pub decay_steps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub tau_floor: f64,
    pub tau_rate: f64,
    /// Steps over which the KL weight rises linearly from 0 to 1; 0 disables
    /// the warm-up.
    pub kl_warmup_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            decay_rate: 0.5,
            decay_steps: 10_000.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 200,
            patience: 10,
            tau_floor: 0.3,
            tau_rate: 3e-5,
            kl_warmup_steps: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, "batch size must be positive");
        ensure!(self.learning_rate > 0.0, "learning rate must be positive");
        ensure!(self.decay_rate > 0.0 && self.decay_rate < 1.0, "decay rate must lie in (0, 1)");
        ensure!(self.decay_steps > 0.0, "decay interval must be positive");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "moment decays must lie in [0, 1)");
        ensure!(self.epsilon > 0.0, "epsilon must be positive");
        ensure!(self.max_epochs >= 1, "at least one epoch required");
        ensure!(self.patience >= 1, "patience must be positive");
        ensure!(self.tau_floor > 0.0 && self.tau_floor <= 1.0, "temperature floor must lie in (0, 1]");
        ensure!(self.tau_rate >= 0.0, "temperature rate must be non-negative");
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.learning_rate * self.decay_rate.powf(step as f64 / self.decay_steps)
    }

    pub fn tau_at(&self, step: u64) -> f64 {
        (-self.tau_rate * step as f64).exp().max(self.tau_floor)
    }

    pub fn kl_weight_at(&self, step: u64) -> f64 {
        if self.kl_warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.kl_warmup_steps as f64).min(1.0)
        }
    }
}

/// `1e-3 · 0.5^(step / 10000)`.
pub fn lr_schedule(step: u64) -> f64 {
    TrainConfig::default().lr_at(step)
}

/// `max(0.3, exp(−3e-5 · step))`.
pub fn anneal_temperature(step: u64) -> f64 {
    TrainConfig::default().tau_at(step)
}

/// Adam moments, one pair per parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[Array2<f64>]) -> Self {
        Adam {
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }

    /// One ascent step along `grads`, then rounds parameters to `f32`.
    pub fn ascend(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let step = lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
                    *p = (*p + step) as f32 as f64;
                });
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: Split,
    pub terms: Breakdown,
    pub lr: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

pub const HISTORY_HEADER: &str = "epoch\tsplit\tobjective\trecon_a\trecon_l\tkl_local\tkl_global\tentropy\tlr\ttau";

/// Tab-separated history table with a header line.
pub fn history_table(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        let t = &r.terms;
        let _ = writeln!(
            out,
            "{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            r.epoch,
            r.split.name(),
            t.objective,
            t.recon_a,
            t.recon_l,
            t.kl_local,
            t.kl_global,
            t.entropy,
            r.lr,
            r.temperature
        );
    }
    out
}

/// Where to pick up an interrupted run.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub optimizer: Adam,
    pub step: u64,
    /// Epochs already completed.
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: AnyModel,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_validation: f64,
    /// Optimizer state at the end of the run.
    pub optimizer: Adam,
    pub step: u64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Early-stopping bookkeeping: stop once `patience` consecutive epochs
/// fail to improve on the best validation objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

fn epoch_rng(seed: u64, epoch: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(epoch as u64);
    rng
}

const TRAIN_SALT: u64 = 0x7472_6169_6e00_0000;
const EVAL_SALT: u64 = 0x6576_616c_0000_0000;

pub fn model_input(batch: &SequenceBatch, indices: &[usize]) -> ModelInput {
    let classes = indices.iter().map(|&i| batch.labels[i].class_id()).collect();
    ModelInput {
        frames: batch.frames(indices),
        classes,
    }
}

/// Evaluation-mode objective over a whole split, as a window-weighted mean
/// over chunks. Draws come from a stream fixed by `seed`.
pub fn evaluate_objective(model: &AnyModel, batch: &SequenceBatch, chunk: usize, seed: u64) -> Result<Breakdown> {
    ensure!(!batch.is_empty(), "cannot evaluate an empty split");
    let mut rng = epoch_rng(seed, 0, EVAL_SALT);
    let mut total = Breakdown::default();
    let n = batch.len() as f64;
    for idx in batch.chunks(chunk) {
        let input = model_input(batch, &idx);
        let mut g = Graph::with_params(model.params());
        let vars = model.record_objective(&mut g, &input, &mut rng, ObjectiveOptions::evaluation())?;
        total.scaled_add(&vars.breakdown(&g), idx.len() as f64 / n);
    }
    Ok(total)
}

/// Gradient of the batch objective with respect to every parameter.
pub fn objective_gradients(
    model: &AnyModel,
    input: &ModelInput,
    rng: &mut dyn rand::RngCore,
    opts: ObjectiveOptions,
) -> Result<(Breakdown, Vec<Array2<f64>>)> {
    let mut g = Graph::with_params(model.params());
    let vars = model.record_objective(&mut g, input, rng, opts)?;
    let terms = vars.breakdown(&g);
    let grads = g.backward(vars.objective);
    Ok((terms, grads.grads.into_iter().take(model.params().len()).collect()))
}

pub fn train(model: AnyModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, dataset, cfg, None, |_, _| Ok(()))
}

/// Training loop. `on_epoch(epoch, model)` runs after every epoch with
/// the current (not best) parameters.
pub fn train_with<F>(
    mut model: AnyModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    resume: Option<ResumeState>,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &AnyModel) -> Result<()>,
{
    cfg.validate()?;
    ensure!(!dataset.train.is_empty(), "training split is empty");
    ensure!(!dataset.validation.is_empty(), "validation split is empty");
    ensure!(
        dataset.train.beams == model.config().beams,
        "dataset has {} beams, model expects {}",
        dataset.train.beams,
        model.config().beams
    );
    let (mut adam, mut step, first_epoch) = match resume {
        Some(r) => {
            ensure!(r.optimizer.m.len() == model.params().len(), "optimizer state does not match the model");
            (r.optimizer, r.step, r.epoch)
        }
        None => (Adam::new(model.params().values()), 0, 0),
    };
    let mut history = Vec::new();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut stopped_early = false;
    let mut epochs_run = first_epoch;
    let n = dataset.train.len();

    for epoch in first_epoch + 1..=cfg.max_epochs {
        let mut rng = epoch_rng(cfg.seed, epoch, TRAIN_SALT);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_terms = Breakdown::default();
        let (mut lr, mut tau) = (cfg.lr_at(step), cfg.tau_at(step));
        for idx in order.chunks(cfg.batch_size) {
            lr = cfg.lr_at(step);
            tau = cfg.tau_at(step);
            let input = model_input(&dataset.train, idx);
            let opts = ObjectiveOptions {
                kl_weight: cfg.kl_weight_at(step),
                ..ObjectiveOptions::training(tau)
            };
            let (terms, grads) = objective_gradients(&model, &input, &mut rng, opts)?;
            if !terms.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    step,
                    breakdown: terms.to_string(),
                });
            }
            adam.ascend(model.params_mut().values_mut(), &grads, cfg, lr);
            step += 1;
            epoch_terms.scaled_add(&terms, idx.len() as f64 / n as f64);
        }
        history.push(HistoryRow {
            epoch,
            split: Split::Train,
            terms: epoch_terms,
            lr,
            temperature: tau,
        });
        let val = evaluate_objective(&model, &dataset.validation, 256, cfg.seed)?;
        if !val.is_finite() {
            return Err(Error::NonFinite {
                step,
                breakdown: val.to_string(),
            });
        }
        history.push(HistoryRow {
            epoch,
            split: Split::Validation,
            terms: val,
            lr,
            temperature: tau,
        });
        log::info!("epoch {epoch}: train {:.4} validation {:.4}", epoch_terms.objective, val.objective);
        epochs_run = epoch;
        on_epoch(epoch, &model)?;
        if stopper.observe(epoch, val.objective) {
            best = model.clone();
        }
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch: stopper.best_epoch,
        best_validation: stopper.best,
        optimizer: adam,
        step,
        epochs_run,
        stopped_early,
    })
}
