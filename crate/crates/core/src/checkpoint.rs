//! Checkpoint directories: one little-endian float32 blob per named
//! parameter plus `manifest.json`, and optionally the optimizer moments.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{ensure, Error, Result};
use crate::model::{AnyModel, ModelConfig, Trainable};
use crate::synth::NormStats;
use crate::training::{Adam, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "discvae-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub t: u64,
    pub first_moment_dir: String,
    pub second_moment_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub norm_stats: NormStats,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub optimizer: Option<OptimizerEntry>,
}

/// Everything a checkpoint holds.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub norm_stats: NormStats,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<Adam>,
}

fn blob_name(name: &str) -> String {
    format!("{name}.f32")
}

fn write_matrices(dir: &Path, names: &[String], values: &[Array2<f64>]) -> Result<Vec<ParamEntry>> {
    blob::create_dir(dir)?;
    names
        .iter()
        .zip(values)
        .map(|(name, v)| {
            let file = blob_name(name);
            blob::write_f32(&dir.join(&file), v.iter().copied())?;
            Ok(ParamEntry {
                name: name.clone(),
                shape: [v.nrows(), v.ncols()],
                file,
            })
        })
        .collect()
}

fn read_matrix(path: &Path, shape: [usize; 2]) -> Result<Array2<f64>> {
    let data = blob::read_f32(path, shape[0] * shape[1])?;
    Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| Error::format(path.display().to_string(), e))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        blob::create_dir(dir)?;
        let store = self.model.params();
        let params = write_matrices(&dir.join("params"), store.names(), store.values())?;
        let optimizer = match &self.optimizer {
            Some(adam) => {
                ensure!(adam.m.len() == store.len(), "optimizer state does not match the model");
                write_matrices(&dir.join("adam_m"), store.names(), &adam.m)?;
                write_matrices(&dir.join("adam_v"), store.names(), &adam.v)?;
                Some(OptimizerEntry {
                    t: adam.t,
                    first_moment_dir: "adam_m".into(),
                    second_moment_dir: "adam_v".into(),
                })
            }
            None => None,
        };
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            dtype: "float32-le".into(),
            model: self.model.config(),
            params,
            norm_stats: self.norm_stats.clone(),
            seed: self.seed,
            step: self.step,
            epoch: self.epoch,
            train: self.train.clone(),
            optimizer,
        };
        blob::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
        let manifest: CheckpointManifest = blob::read_json(&dir.join("manifest.json"))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::format("checkpoint manifest", format!("unsupported format {:?}", manifest.format)));
        }
        Ok(manifest)
    }

    /// Rebuilds the model from its configuration and fills every parameter
    /// from the blobs. Names and shapes must match exactly.
    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let manifest = Self::read_manifest(dir)?;
        let mut model = AnyModel::new(&manifest.model, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected: Vec<(String, [usize; 2])> = {
            let store = model.params();
            store
                .names()
                .iter()
                .zip(store.values())
                .map(|(n, v)| (n.clone(), [v.nrows(), v.ncols()]))
                .collect()
        };
        let listed: Vec<(String, [usize; 2])> = manifest.params.iter().map(|p| (p.name.clone(), p.shape)).collect();
        if expected != listed {
            return Err(Error::format(
                "checkpoint manifest",
                "parameter names or shapes do not match the model configuration",
            ));
        }
        for (slot, entry) in model.params_mut().values_mut().iter_mut().zip(&manifest.params) {
            *slot = read_matrix(&dir.join("params").join(&entry.file), entry.shape)?;
        }
        let optimizer = match &manifest.optimizer {
            Some(o) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for entry in &manifest.params {
                    m.push(read_matrix(&dir.join(&o.first_moment_dir).join(&entry.file), entry.shape)?);
                    v.push(read_matrix(&dir.join(&o.second_moment_dir).join(&entry.file), entry.shape)?);
                }
                Some(Adam { m, v, t: o.t })
            }
            None => None,
        };
        Ok(Checkpoint {
            model,
            norm_stats: manifest.norm_stats,
            seed: manifest.seed,
            step: manifest.step,
            epoch: manifest.epoch,
            train: manifest.train,
            optimizer,
        })
    }
}
