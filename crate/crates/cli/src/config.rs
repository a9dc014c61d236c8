//! Run configuration: a TOML file, then flag overrides, then derived
//! per-subsystem seeds.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use discvae::model::{ModelConfig, ModelKind};
use discvae::synth::DatasetConfig;
use discvae::training::TrainConfig;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    /// K = 13, 16-d latents, 512-unit networks.
    Full,
    /// Same K and latents, 64-unit networks.
    Desk,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seed: u64,
    pub model: ModelKind,
    pub size: Size,
    pub clusters: Option<usize>,
    pub dim_global: Option<usize>,
    pub dim_local: Option<usize>,
    pub beams: usize,
    pub t_len: usize,
    pub horizon: usize,
    pub epochs: Option<usize>,
    pub knn_k: usize,
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub select_k: Vec<usize>,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            seed: 0,
            model: ModelKind::Discvae,
            size: Size::Full,
            clusters: None,
            dim_global: None,
            dim_local: None,
            beams: discvae::synth::geometry::DEFAULT_BEAMS,
            t_len: 20,
            horizon: 10,
            epochs: None,
            knn_k: discvae::evaluation::DEFAULT_KNN_K,
            data: DatasetConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            select_k: vec![5, 9, 13, 17],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Test window used as the prefix.
    pub index: usize,
    /// Prefix length; 0 takes the whole window.
    pub prefix: usize,
    /// Rollout length.
    pub steps: usize,
    /// Rollouts per cluster.
    pub samples: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            index: 0,
            prefix: 0,
            steps: 10,
            samples: 3,
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub model: Option<ModelKind>,
    pub size: Option<Size>,
    pub clusters: Option<usize>,
    pub dim_global: Option<usize>,
    pub dim_local: Option<usize>,
    pub beams: Option<usize>,
    pub horizon: Option<usize>,
    pub epochs: Option<usize>,
    pub knn_k: Option<usize>,
}

/// Everything a command needs, written into each output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolved {
    pub command: String,
    pub seed: u64,
    pub init_seed: u64,
    pub eval_seed: u64,
    pub size: Size,
    pub knn_k: usize,
    pub model: ModelConfig,
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub select_k: Vec<usize>,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
}

const DATA_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

/// Seed for one subsystem, drawn from its own stream of the root seed.
/// Kept below 2^63 so it survives TOML's signed integers.
pub fn subsystem_seed(root: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng.next_u64() >> 1
}

pub fn read_file(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

impl FileConfig {
    pub fn resolve(mut self, flags: &Overrides, command: &str, paths: Paths) -> Result<Resolved> {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = flags.$f { self.$f = v; } )* };
        }
        take!(seed, model, size, beams, horizon, knn_k);
        self.clusters = flags.clusters.or(self.clusters);
        self.dim_global = flags.dim_global.or(self.dim_global);
        self.dim_local = flags.dim_local.or(self.dim_local);
        self.epochs = flags.epochs.or(self.epochs);

        let mut model = match self.size {
            Size::Full => ModelConfig::full(self.model),
            Size::Desk => ModelConfig::desk(self.model),
        };
        model.beams = self.beams;
        if let Some(k) = self.clusters {
            model.clusters = k;
        }
        if let Some(d) = self.dim_global {
            model.dim_global = d;
        }
        if let Some(d) = self.dim_local {
            model.dim_local = d;
        }
        model.validate()?;

        let mut data = self.data;
        data.seed = subsystem_seed(self.seed, DATA_STREAM);
        data.beams = self.beams;
        data.t_len = self.t_len;
        data.horizon = self.horizon;
        let mut train = self.train;
        train.seed = subsystem_seed(self.seed, TRAIN_STREAM);
        if let Some(e) = self.epochs {
            train.max_epochs = e;
        }
        train.validate()?;
        if self.knn_k == 0 {
            bail!("knn_k must be at least 1");
        }
        Ok(Resolved {
            command: command.to_string(),
            seed: self.seed,
            init_seed: subsystem_seed(self.seed, INIT_STREAM),
            eval_seed: subsystem_seed(self.seed, EVAL_STREAM),
            size: self.size,
            knn_k: self.knn_k,
            model,
            data,
            train,
            sample: self.sample,
            select_k: self.select_k,
            paths,
        })
    }
}

impl Resolved {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing the resolved config")
    }
}
