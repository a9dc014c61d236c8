//! Nearest-neighbour probe, classification metrics, NMI, forecast error,
//! cluster tables, the K sweep and the evaluation report.

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::model::{AnyModel, ModelConfig};
use crate::seq::Sampling;
use crate::synth::labels::{Manoeuvre, NUM_CLASSES};
use crate::synth::{Dataset, SequenceBatch};
use crate::training::{self, TrainConfig};

pub const DEFAULT_KNN_K: usize = 5;

fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean k-nearest-neighbour majority vote. Distance ties keep the
/// lower train index; vote ties go to the label of the nearest neighbour
/// among the tied labels.
pub fn knn_classify(train: &Array2<f64>, labels: &[usize], test: &Array2<f64>, k: usize) -> Result<Vec<usize>> {
    ensure!(k >= 1, "k must be at least 1");
    ensure!(train.nrows() >= 1, "training set is empty");
    ensure!(train.nrows() == labels.len(), "one label per training point required");
    ensure!(k <= train.nrows(), "k = {k} exceeds the training set size {}", train.nrows());
    ensure!(train.ncols() == test.ncols(), "train and test dimensions differ");
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::with_capacity(test.nrows());
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train.nrows());
    for q in test.rows() {
        dist.clear();
        dist.extend(train.rows().into_iter().enumerate().map(|(i, r)| (squared_distance(q, r), i)));
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nearest = &mut dist[..k];
        nearest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        for &(_, i) in nearest.iter() {
            votes[labels[i]] += 1;
        }
        let top = *votes.iter().max().expect("k >= 1");
        let winner = nearest
            .iter()
            .map(|&(_, i)| labels[i])
            .find(|&l| votes[l] == top)
            .expect("a neighbour holds the top vote");
        out.push(winner);
    }
    Ok(out)
}

/// Accuracy in percent and macro-F1 over `classes` classes; a class with
/// no support and no predictions contributes an F1 of 0.
pub fn accuracy_f1(predictions: &[usize], labels: &[usize], classes: usize) -> Result<(f64, f64)> {
    ensure!(predictions.len() == labels.len(), "predictions and labels differ in length");
    ensure!(!labels.is_empty(), "no samples");
    ensure!(
        predictions.iter().chain(labels).all(|&c| c < classes),
        "class index out of range"
    );
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fnn = vec![0usize; classes];
    let mut correct = 0;
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fnn[l] += 1;
        }
    }
    let f1_sum: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fnn[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok((100.0 * correct as f64 / labels.len() as f64, f1_sum / classes as f64))
}

fn entropy_of_counts(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two
/// entropies. Zero when either side is constant.
pub fn nmi(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    ensure!(assignments.len() == labels.len(), "assignments and labels differ in length");
    ensure!(!labels.is_empty(), "no samples");
    let n = labels.len() as f64;
    let ka = assignments.iter().max().unwrap() + 1;
    let kl = labels.iter().max().unwrap() + 1;
    let mut joint = vec![0usize; ka * kl];
    let mut ca = vec![0usize; ka];
    let mut cl = vec![0usize; kl];
    for (&a, &l) in assignments.iter().zip(labels) {
        joint[a * kl + l] += 1;
        ca[a] += 1;
        cl[l] += 1;
    }
    let ha = entropy_of_counts(ca.iter().copied(), n);
    let hl = entropy_of_counts(cl.iter().copied(), n);
    if ha <= 0.0 || hl <= 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for a in 0..ka {
        for l in 0..kl {
            let c = joint[a * kl + l];
            if c > 0 {
                let pj = c as f64 / n;
                mi += pj * (pj * n * n / (ca[a] as f64 * cl[l] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (ha + hl))).clamp(0.0, 1.0))
}

/// Mean squared error per dimension, normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastMse {
    pub joystick: f64,
    pub laser: f64,
    pub windows: usize,
    pub horizon: usize,
}

/// Predicted continuations, one `windows × dim` matrix per future tick.
pub trait Forecaster {
    fn forecast(&self, batch: &SequenceBatch, indices: &[usize], horizon: usize) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)>;
}

impl Forecaster for AnyModel {
    /// Rollout means: latent means throughout, decoded means fed back.
    fn forecast(&self, batch: &SequenceBatch, indices: &[usize], horizon: usize) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
        let prefix = batch.frames(indices);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rollout = match self {
            AnyModel::Discvae(m) => m.predict_rollout_with(&prefix, horizon, &mut rng, None, Sampling::Mean)?,
            AnyModel::Vrnn(m) => m.predict_rollout_with(&prefix, horizon, &mut rng, Sampling::Mean)?,
            _ => {
                return Err(Error::Contract(format!(
                    "model kind {} cannot forecast",
                    self.kind()
                )))
            }
        };
        Ok(rollout
            .steps
            .into_iter()
            .map(|s| (s.joystick, s.laser))
            .unzip())
    }
}

/// Forecast error over the windows with a recorded continuation: the
/// whole window is the prefix and the next `horizon` ticks are the target.
pub fn forecast_mse<F: Forecaster + ?Sized>(model: &F, batch: &SequenceBatch, horizon: usize) -> Result<ForecastMse> {
    ensure!(horizon >= 1, "horizon must be at least 1");
    ensure!(horizon <= batch.horizon, "horizon {horizon} exceeds the stored continuation of {}", batch.horizon);
    let with_future = batch.with_future();
    ensure!(!with_future.is_empty(), "no window has a recorded continuation");
    let (mut se_a, mut se_l) = (0.0, 0.0);
    for idx in with_future.chunks(256) {
        let truth = batch.future_frames(idx);
        let (pa, pl) = model.forecast(batch, idx, horizon)?;
        ensure!(pa.len() == horizon && pl.len() == horizon, "forecast has the wrong length");
        for t in 0..horizon {
            se_a += (&pa[t] - &truth.commands[t]).mapv(|v| v * v).sum();
            se_l += (&pl[t] - &truth.ranges[t]).mapv(|v| v * v).sum();
        }
    }
    let cells = (with_future.len() * horizon) as f64;
    Ok(ForecastMse {
        joystick: se_a / (cells * 2.0),
        laser: se_l / (cells * batch.beams as f64),
        windows: with_future.len(),
        horizon,
    })
}

/// Cluster-by-label count tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub clusters: usize,
    /// `clusters × 6`, columns in [`Manoeuvre::ALL`] order.
    pub by_manoeuvre: Vec<Vec<usize>>,
    /// `clusters × 2`: wide, narrow.
    pub by_width: Vec<Vec<usize>>,
    /// `clusters × 6`, by generator behaviour mode.
    pub by_mode: Vec<Vec<usize>>,
}

impl ClusterReport {
    pub fn from_assignments(assignments: &[usize], batch: &SequenceBatch, clusters: usize) -> Result<Self> {
        ensure!(assignments.len() == batch.len(), "one assignment per window required");
        ensure!(assignments.iter().all(|&c| c < clusters), "assignment out of range");
        let mut by_manoeuvre = vec![vec![0; 6]; clusters];
        let mut by_width = vec![vec![0; 2]; clusters];
        let mut by_mode = vec![vec![0; 6]; clusters];
        for (i, &c) in assignments.iter().enumerate() {
            by_manoeuvre[c][batch.labels[i].manoeuvre.index()] += 1;
            by_width[c][batch.labels[i].narrow as usize] += 1;
            by_mode[c][batch.origins[i].mode.index()] += 1;
        }
        Ok(ClusterReport {
            clusters,
            by_manoeuvre,
            by_width,
            by_mode,
        })
    }

    /// Column sums of a table.
    pub fn column_totals(table: &[Vec<usize>]) -> Vec<usize> {
        let cols = table.first().map_or(0, Vec::len);
        (0..cols).map(|j| table.iter().map(|r| r[j]).sum()).collect()
    }

    /// Largest share of one manoeuvre's windows held by a single cluster.
    pub fn max_share(&self, manoeuvre: Manoeuvre) -> f64 {
        let j = manoeuvre.index();
        let total: usize = self.by_manoeuvre.iter().map(|r| r[j]).sum();
        if total == 0 {
            return 0.0;
        }
        let best = self.by_manoeuvre.iter().map(|r| r[j]).max().unwrap_or(0);
        best as f64 / total as f64
    }

    /// Tab-separated table with a header row.
    pub fn table(&self, which: &str) -> String {
        let (header, rows): (Vec<String>, &Vec<Vec<usize>>) = match which {
            "width" => (vec!["wide".into(), "narrow".into()], &self.by_width),
            "mode" => (
                crate::synth::BehaviourMode::ALL.iter().map(|m| m.name().to_string()).collect(),
                &self.by_mode,
            ),
            _ => (Manoeuvre::ALL.iter().map(|m| m.name().to_string()).collect(), &self.by_manoeuvre),
        };
        let mut out = format!("cluster\t{}\n", header.join("\t"));
        for (c, r) in rows.iter().enumerate() {
            let cells: Vec<String> = r.iter().map(usize::to_string).collect();
            out.push_str(&format!("{c}\t{}\n", cells.join("\t")));
        }
        out
    }
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let text = serde_json::to_string(value).map_err(|e| Error::format("config", e))?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelConfig,
    pub knn_k: usize,
    /// KNN (or, for the classifier, direct) test accuracy in percent.
    pub accuracy: f64,
    pub macro_f1: f64,
    pub forecast: Option<ForecastMse>,
    /// NMI of cluster assignments against generator modes.
    pub nmi_modes: Option<f64>,
    /// NMI of cluster assignments against the twelve window classes.
    pub nmi_classes: Option<f64>,
    pub clusters: Option<ClusterReport>,
    pub test_windows: usize,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

/// Full evaluation on the test split. `seeds` and `config_hash` are
/// recorded as given.
pub fn evaluate(model: &AnyModel, dataset: &Dataset, knn_k: usize, seeds: Vec<u64>, config_hash: String) -> Result<EvalReport> {
    let test = &dataset.test;
    ensure!(!test.is_empty(), "test split is empty");
    let test_frames = test.all_frames();
    let test_labels = test.class_ids();
    let predictions = match model {
        AnyModel::Bilstm(m) => m.predict(&test_frames)?,
        _ => {
            let train_emb = model.embedding(&dataset.train.all_frames())?;
            let test_emb = model.embedding(&test_frames)?;
            knn_classify(&train_emb, &dataset.train.class_ids(), &test_emb, knn_k)?
        }
    };
    let (accuracy, macro_f1) = accuracy_f1(&predictions, &test_labels, NUM_CLASSES)?;
    let forecast = if model.kind().is_generative_sequence() && !test.with_future().is_empty() {
        Some(forecast_mse(model, test, test.horizon)?)
    } else {
        None
    };
    let (nmi_modes, nmi_classes, clusters) = match model.assign_clusters(&test_frames) {
        Some(assign) => {
            let k = model.config().clusters;
            (
                Some(nmi(&assign, &test.modes())?),
                Some(nmi(&assign, &test_labels)?),
                Some(ClusterReport::from_assignments(&assign, test, k)?),
            )
        }
        None => (None, None, None),
    };
    Ok(EvalReport {
        model: model.config(),
        knn_k,
        accuracy,
        macro_f1,
        forecast,
        nmi_modes,
        nmi_classes,
        clusters,
        test_windows: test.len(),
        seeds,
        config_hash,
    })
}

/// One row of the K sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectKRow {
    pub clusters: usize,
    /// NMI against generator modes on the test split.
    pub nmi: f64,
    pub epochs: usize,
}

/// Trains one clustered model per candidate K with a fixed seed and
/// reports test NMI against generator modes.
pub fn select_k(dataset: &Dataset, candidates: &[usize], base: &ModelConfig, train_cfg: &TrainConfig) -> Result<Vec<SelectKRow>> {
    ensure!(!candidates.is_empty(), "no candidate K given");
    ensure!(base.kind.is_clustered(), "model kind {} has no clusters", base.kind);
    let mut rows = Vec::with_capacity(candidates.len());
    for &k in candidates {
        let mut cfg = base.clone();
        cfg.clusters = k;
        let model = AnyModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(train_cfg.seed))?;
        let out = training::train(model, dataset, train_cfg)?;
        let assign = out
            .model
            .assign_clusters(&dataset.test.all_frames())
            .expect("clustered model");
        rows.push(SelectKRow {
            clusters: k,
            nmi: nmi(&assign, &dataset.test.modes())?,
            epochs: out.epochs_run,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn knn_exact_match_with_k1() {
        let train = array![[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]];
        let labels = [0, 1, 2];
        let test = array![[1.0, 1.0]];
        assert_eq!(knn_classify(&train, &labels, &test, 1).unwrap(), vec![1]);
    }

    #[test]
    fn knn_k_larger_than_train_errors() {
        let train = array![[0.0], [1.0]];
        assert!(knn_classify(&train, &[0, 1], &array![[0.5]], 3).is_err());
    }

    #[test]
    fn knn_vote_tie_goes_to_nearest() {
        let train = array![[0.0], [1.0], [-1.5], [2.0]];
        let labels = [0, 1, 1, 0];
        assert_eq!(knn_classify(&train, &labels, &array![[0.1]], 4).unwrap(), vec![0]);
        assert_eq!(knn_classify(&train, &labels, &array![[0.9]], 4).unwrap(), vec![1]);
    }

    #[test]
    fn metrics_perfect_and_constant() {
        assert_eq!(accuracy_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), (100.0, 1.0));
        let (acc, f1) = accuracy_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(acc, 50.0);
        assert!((f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_identity_constant_and_renaming() {
        let a = [0, 0, 1, 1, 2, 2];
        assert!((nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0; 6], &a).unwrap(), 0.0);
        let renamed = [2, 2, 0, 0, 1, 1];
        assert!((nmi(&renamed, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = [0, 1, 0, 1, 1, 1];
        assert!((nmi(&a, &b).unwrap() - nmi(&b, &a).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn config_hash_is_stable() {
        let h = config_hash(&("a", 1)).unwrap();
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash(&("a", 1)).unwrap());
        assert_ne!(h, config_hash(&("a", 2)).unwrap());
    }
}
