//! Model configuration, the model registry and the common training
//! interface.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{BilstmClassifier, Vrnn};
use crate::discvae::Discvae;
use crate::error::{ensure, Error, Result};
use crate::gmvae::Gmvae;
use crate::graph::Graph;
use crate::nn::ParamStore;
use crate::seq::{ObjectiveOptions, ObjectiveVars};
use crate::synth::labels::NUM_CLASSES;
use crate::synth::Frames;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Discvae,
    Gmvae,
    Vrnn,
    Dseqvae,
    Bilstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Discvae,
        ModelKind::Gmvae,
        ModelKind::Vrnn,
        ModelKind::Dseqvae,
        ModelKind::Bilstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Discvae => "discvae",
            ModelKind::Gmvae => "gmvae",
            ModelKind::Vrnn => "vrnn",
            ModelKind::Dseqvae => "dseqvae",
            ModelKind::Bilstm => "bilstm",
        }
    }

    /// Whether the model has a discrete cluster variable.
    pub fn is_clustered(self) -> bool {
        matches!(self, ModelKind::Discvae | ModelKind::Gmvae)
    }

    /// Whether the model can roll sequences forward.
    pub fn is_generative_sequence(self) -> bool {
        matches!(self, ModelKind::Discvae | ModelKind::Dseqvae | ModelKind::Vrnn)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown model kind {s:?}")))
    }
}

/// Sizes of every model. Each kind uses the fields it needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub beams: usize,
    /// Number of mixture components `K`.
    pub clusters: usize,
    pub dim_global: usize,
    pub dim_local: usize,
    /// Hidden width of every perceptron.
    pub hidden: usize,
    /// State size of the bidirectional summary encoder.
    pub global_state: usize,
    /// State size of the forward latent recurrence.
    pub local_state: usize,
    pub joystick_features: usize,
    pub laser_features: usize,
    /// Output classes of the supervised classifier.
    pub classes: usize,
}

impl ModelConfig {
    /// Full-size defaults: `K = 13`, 16-dimensional latents, 512-unit
    /// perceptrons and summary encoder, 128-unit local state, 8 + 128
    /// encoded features.
    pub fn full(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            beams: 72,
            clusters: 13,
            dim_global: 16,
            dim_local: 16,
            hidden: 512,
            global_state: 512,
            local_state: 128,
            joystick_features: 8,
            laser_features: 128,
            classes: NUM_CLASSES,
        }
    }

    /// Narrower networks that train on a single CPU core in minutes. The
    /// cluster count and latent sizes keep their full-size values, and the
    /// local state stays a quarter of the global state.
    pub fn desk(kind: ModelKind) -> Self {
        ModelConfig {
            hidden: 64,
            global_state: 64,
            local_state: 16,
            joystick_features: 8,
            laser_features: 24,
            ..ModelConfig::full(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.beams >= 1, "beam count must be at least 1");
        ensure!(self.clusters >= 1, "cluster count must be at least 1");
        for (name, v) in [
            ("dim_global", self.dim_global),
            ("dim_local", self.dim_local),
            ("hidden", self.hidden),
            ("global_state", self.global_state),
            ("local_state", self.local_state),
            ("joystick_features", self.joystick_features),
            ("laser_features", self.laser_features),
            ("classes", self.classes),
        ] {
            ensure!(v >= 1, "{name} must be positive");
        }
        Ok(())
    }

    /// Width of the static model's input: window means of both modalities.
    pub fn static_input_dim(&self) -> usize {
        2 + self.beams
    }
}

/// Input to one objective evaluation.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub frames: Frames,
    /// Window class ids; used only by the supervised classifier.
    pub classes: Vec<usize>,
}

/// Anything the training loop can optimize.
pub trait Trainable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Records the batch-mean objective (to be maximized) on `g`, which must
    /// have been built from [`Trainable::params`].
    fn record_objective(
        &self,
        g: &mut Graph,
        input: &ModelInput,
        rng: &mut dyn rand::RngCore,
        opts: ObjectiveOptions,
    ) -> Result<ObjectiveVars>;
}

/// Any model in the registry.
#[derive(Debug, Clone)]
pub enum AnyModel {
    /// Also the disentangled baseline, which is the same network with a
    /// fixed standard-normal global prior.
    Discvae(Discvae),
    Gmvae(Gmvae),
    Vrnn(Vrnn),
    Bilstm(BilstmClassifier),
}

impl AnyModel {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(match config.kind {
            ModelKind::Discvae | ModelKind::Dseqvae => AnyModel::Discvae(Discvae::new(config.clone(), rng)?),
            ModelKind::Gmvae => AnyModel::Gmvae(Gmvae::from_model_config(config, rng)?),
            ModelKind::Vrnn => AnyModel::Vrnn(Vrnn::new(config.clone(), rng)?),
            ModelKind::Bilstm => AnyModel::Bilstm(BilstmClassifier::new(config.clone(), rng)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            AnyModel::Discvae(m) => m.config.clone(),
            AnyModel::Gmvae(m) => m.model_config.clone(),
            AnyModel::Vrnn(m) => m.config.clone(),
            AnyModel::Bilstm(m) => m.config.clone(),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.config().kind
    }

    fn inner(&self) -> &dyn Trainable {
        match self {
            AnyModel::Discvae(m) => m,
            AnyModel::Gmvae(m) => m,
            AnyModel::Vrnn(m) => m,
            AnyModel::Bilstm(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Trainable {
        match self {
            AnyModel::Discvae(m) => m,
            AnyModel::Gmvae(m) => m,
            AnyModel::Vrnn(m) => m,
            AnyModel::Bilstm(m) => m,
        }
    }

    /// Latent representation used by the nearest-neighbour probe.
    pub fn embedding(&self, frames: &Frames) -> Result<ndarray::Array2<f64>> {
        match self {
            AnyModel::Discvae(m) => m.global_embedding(frames),
            AnyModel::Gmvae(m) => m.embedding(&crate::gmvae::window_means(frames)),
            AnyModel::Vrnn(m) => m.last_posterior_mean(frames),
            AnyModel::Bilstm(m) => m.merged_state(frames),
        }
    }

    /// Cluster assignment, for models with a discrete variable.
    pub fn assign_clusters(&self, frames: &Frames) -> Option<Vec<usize>> {
        match self {
            AnyModel::Discvae(m) if m.is_mixture() => Some(m.assign_cluster(frames)),
            AnyModel::Gmvae(m) => Some(m.assign(&crate::gmvae::window_means(frames))),
            _ => None,
        }
    }
}

impl Trainable for AnyModel {
    fn params(&self) -> &ParamStore {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.inner_mut().params_mut()
    }

    fn record_objective(
        &self,
        g: &mut Graph,
        input: &ModelInput,
        rng: &mut dyn rand::RngCore,
        opts: ObjectiveOptions,
    ) -> Result<ObjectiveVars> {
        self.inner().record_objective(g, input, rng, opts)
    }
}
