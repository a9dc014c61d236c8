//! Static Gaussian-mixture VAE: `y ~ Cat(1/K)`, `z ~ N(μ_y, σ²_y)`,
//! `x ~ N(μ_x(z), σ²_dec I)`, with posterior `q(y|x) q(z|x,y)`.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::dist::{self, CategoricalPosterior, DiagGaussian, GaussianVars, RelaxedSample};
use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::model::{ModelConfig, ModelInput, Trainable};
use crate::nn::{self, ComponentTable, DenseBlock, ParamStore};
use crate::seq::{self, ObjectiveForm, ObjectiveOptions, ObjectiveVars, YMode};
use crate::synth::Frames;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GmvaeConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub clusters: usize,
    pub dim_z: usize,
}

#[derive(Debug, Clone)]
pub struct Gmvae {
    pub config: GmvaeConfig,
    /// Registry configuration when built through [`crate::model::AnyModel`].
    pub model_config: ModelConfig,
    pub params: ParamStore,
    pub encoder_y: DenseBlock,
    pub encoder_z: DenseBlock,
    pub prior_z: ComponentTable,
    pub decoder_x: DenseBlock,
}

/// Noise for one objective evaluation.
#[derive(Debug, Clone)]
pub struct GmvaeNoise {
    pub gumbel: Array2<f64>,
    pub eps: Array2<f64>,
}

impl GmvaeNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize, dim_z: usize) -> Self {
        let gumbel = seq::gumbel_rows(rng, n, k);
        let eps = seq::normal_rows(rng, n, dim_z);
        GmvaeNoise { gumbel, eps }
    }
}

/// Output of [`Gmvae::infer`] for a single datum.
#[derive(Debug, Clone)]
pub struct GmvaeInference {
    pub q_y: CategoricalPosterior,
    pub y: RelaxedSample,
    pub q_z: DiagGaussian,
    pub z: Array1<f64>,
}

/// Per-window means of the normalized commands and ranges; the static
/// model's view of a sequence.
pub fn window_means(frames: &Frames) -> Array2<f64> {
    let n = frames.batch_size();
    let b = frames.beams();
    let mut out = Array2::zeros((n, 2 + b));
    let t = frames.len().max(1) as f64;
    for (c, r) in frames.commands.iter().zip(&frames.ranges) {
        for i in 0..n {
            for j in 0..2 {
                out[[i, j]] += c[[i, j]] / t;
            }
            for j in 0..b {
                out[[i, 2 + j]] += r[[i, j]] / t;
            }
        }
    }
    out
}

impl Gmvae {
    pub fn new<R: Rng + ?Sized>(config: GmvaeConfig, rng: &mut R) -> Result<Self> {
        let mut mc = ModelConfig::full(crate::model::ModelKind::Gmvae);
        mc.clusters = config.clusters;
        mc.dim_global = config.dim_z;
        mc.hidden = config.hidden;
        mc.beams = config.input_dim.saturating_sub(2).max(1);
        Self::build(config, mc, rng)
    }

    pub fn from_model_config<R: Rng + ?Sized>(mc: &ModelConfig, rng: &mut R) -> Result<Self> {
        let config = GmvaeConfig {
            input_dim: mc.static_input_dim(),
            hidden: mc.hidden,
            clusters: mc.clusters,
            dim_z: mc.dim_global,
        };
        Self::build(config, mc.clone(), rng)
    }

    fn build<R: Rng + ?Sized>(config: GmvaeConfig, model_config: ModelConfig, rng: &mut R) -> Result<Self> {
        let GmvaeConfig {
            input_dim,
            hidden,
            clusters,
            dim_z,
        } = config;
        ensure!(input_dim >= 1 && hidden >= 1 && clusters >= 1 && dim_z >= 1, "sizes must be positive");
        let mut params = ParamStore::new();
        let encoder_y = DenseBlock::new(&mut params, "q_y", input_dim, hidden, clusters, rng);
        let encoder_z = DenseBlock::new(&mut params, "q_z", input_dim + clusters, hidden, 2 * dim_z, rng);
        let prior_z = ComponentTable::new(&mut params, "p_z", clusters, dim_z, rng);
        let decoder_x = DenseBlock::new(&mut params, "p_x", dim_z, hidden, input_dim, rng);
        params.round_to_f32();
        Ok(Gmvae {
            config,
            model_config,
            params,
            encoder_y,
            encoder_z,
            prior_z,
            decoder_x,
        })
    }

    pub fn noise<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> GmvaeNoise {
        GmvaeNoise::draw(rng, n, self.config.clusters, self.config.dim_z)
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        ensure!(x.nrows() >= 1, "batch must be non-empty");
        ensure!(
            x.ncols() == self.config.input_dim,
            "input has {} columns, model expects {}",
            x.ncols(),
            self.config.input_dim
        );
        Ok(())
    }

    /// Records the objective: batch mean of
    /// `log p(x|z) − KL(q(z|x,y) || p(z|y)) + H(q(y|x))`, one sample per datum.
    pub fn record(&self, g: &mut Graph, x: &Array2<f64>, noise: &GmvaeNoise, opts: ObjectiveOptions) -> Result<ObjectiveVars> {
        self.check_input(x)?;
        let n = x.nrows();
        let xv = g.constant(x.clone());
        let logits = self.encoder_y.forward(g, xv);
        let y = match opts.y_mode {
            YMode::Relaxed => {
                ensure!(opts.temperature > 0.0, "temperature must be positive");
                dist::gumbel_softmax(g, logits, noise.gumbel.clone(), opts.temperature)
            }
            YMode::Hard => {
                let idx = nn::row_argmax(g.value(logits));
                g.constant(nn::one_hot(&idx, self.config.clusters))
            }
        };
        let xy = g.concat_cols(&[xv, y]);
        let raw = self.encoder_z.forward(g, xy);
        let q = GaussianVars::from_head(g, raw);
        let eps = g.constant(noise.eps.clone());
        let z = dist::reparam(g, q, eps);
        let (pm, plv) = self.prior_z.lookup(g, y);
        let p = GaussianVars::new(g, pm, plv);
        let mean_x = self.decoder_x.forward(g, z);
        let recon = dist::gaussian_loglik_rows(g, xv, mean_x, dist::DECODER_VARIANCE);
        let recon = g.sum_all(recon);
        let kl = dist::kl_rows(g, q, p);
        let kl = g.sum_all(kl);
        let reg = match opts.form {
            ObjectiveForm::Entropy => dist::entropy_rows(g, logits),
            ObjectiveForm::UniformKl => {
                let k = dist::kl_uniform_rows(g, logits);
                g.neg(k)
            }
        };
        let reg = g.sum_all(reg);
        let wkl = seq::weighted(g, kl, opts.kl_weight);
        let total = g.sub(recon, wkl);
        let total = g.add(total, reg);
        let objective = g.scale(total, 1.0 / n as f64);
        Ok(ObjectiveVars {
            objective,
            recon_a: Some(recon),
            recon_l: None,
            kl_local: None,
            kl_global: Some(kl),
            entropy: Some(reg),
            batch: n,
        })
    }

    /// Value-level objective with fresh draws.
    pub fn elbo<R: Rng + ?Sized>(&self, x: &Array2<f64>, rng: &mut R, opts: ObjectiveOptions) -> Result<crate::seq::Breakdown> {
        let noise = self.noise(rng, x.nrows());
        let mut g = Graph::with_params(&self.params);
        let vars = self.record(&mut g, x, &noise, opts)?;
        Ok(vars.breakdown(&g))
    }

    fn logits_node(&self, g: &mut Graph, x: &Array2<f64>) -> Var {
        let xv = g.constant(x.clone());
        self.encoder_y.forward(g, xv)
    }

    /// `q(y|x)` logits, one row per datum.
    pub fn logits(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut g = Graph::with_params(&self.params);
        let l = self.logits_node(&mut g, x);
        Ok(g.value(l).clone())
    }

    /// Most probable component per datum.
    pub fn assign(&self, x: &Array2<f64>) -> Vec<usize> {
        match self.logits(x) {
            Ok(l) => nn::row_argmax(&l),
            Err(_) => Vec::new(),
        }
    }

    /// Posterior mean of `z` under the hard assignment.
    pub fn embedding(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut g = Graph::with_params(&self.params);
        let xv = g.constant(x.clone());
        let logits = self.encoder_y.forward(&mut g, xv);
        let idx = nn::row_argmax(g.value(logits));
        let y = g.constant(nn::one_hot(&idx, self.config.clusters));
        let xy = g.concat_cols(&[xv, y]);
        let raw = self.encoder_z.forward(&mut g, xy);
        let q = GaussianVars::from_head(&mut g, raw);
        Ok(g.value(q.mean).clone())
    }

    /// `q(y|x)`, a relaxed sample of `y`, `q(z|x,y)` given that sample and a
    /// reparameterized `z`.
    pub fn infer<R: Rng + ?Sized>(&self, x: &Array1<f64>, temperature: f64, rng: &mut R) -> Result<GmvaeInference> {
        let xm = nn::to_rows(x);
        self.check_input(&xm)?;
        ensure!(temperature > 0.0, "temperature must be positive");
        let k = self.config.clusters;
        let u: Array1<f64> = Array1::from_shape_fn(k, |_| rng.random_range(f64::MIN_POSITIVE..1.0));
        let eps: Array1<f64> = seq::normal_rows(rng, 1, self.config.dim_z).row(0).to_owned();
        let mut g = Graph::with_params(&self.params);
        let logits = self.logits_node(&mut g, &xm);
        let q_y = CategoricalPosterior::new(g.value(logits).row(0).to_owned())?;
        let y = dist::gumbel_softmax_sample(&q_y, temperature, &u)?;
        let xv = g.constant(xm);
        let yv = g.constant(nn::to_rows(&y.probs));
        let xy = g.concat_cols(&[xv, yv]);
        let raw = self.encoder_z.forward(&mut g, xy);
        let q = GaussianVars::from_head(&mut g, raw);
        let q_z = q.to_value(&g, 0);
        let z = dist::reparam_sample(&q_z, &eps)?;
        Ok(GmvaeInference { q_y, y, q_z, z })
    }

    /// `z ~ p(z|y)` then the decoder mean; returns `(z, x)` with
    /// `x ~ N(μ_x(z), σ²_dec I)`.
    pub fn generate_with_latent<R: Rng + ?Sized>(&self, y: &Array1<f64>, rng: &mut R) -> Result<(Array1<f64>, Array1<f64>)> {
        let k = self.config.clusters;
        ensure!(y.len() == k, "y has length {}, expected {k}", y.len());
        let ones = y.iter().filter(|&&v| v == 1.0).count();
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        ensure!(ones == 1 && zeros == k - 1, "y must be one-hot");
        let c = nn::argmax(y.view());
        let means = self.params.get(self.prior_z.means_id()).row(c).to_owned();
        let log_vars = self.params.get(self.prior_z.log_vars_id()).row(c).to_owned();
        let prior = DiagGaussian::new(means, log_vars)?;
        let eps = seq::normal_rows(rng, 1, self.config.dim_z).row(0).to_owned();
        let z = dist::reparam_sample(&prior, &eps)?;
        let mut g = Graph::with_params(&self.params);
        let zv = g.constant(nn::to_rows(&z));
        let mean = self.decoder_x.forward(&mut g, zv);
        let noise = seq::normal_rows(rng, 1, self.config.input_dim).row(0).to_owned();
        let sd = dist::DECODER_VARIANCE.sqrt();
        let x = g.value(mean).row(0).to_owned() + noise * sd;
        Ok((z, x))
    }

    pub fn generate<R: Rng + ?Sized>(&self, y: &Array1<f64>, rng: &mut R) -> Result<Array1<f64>> {
        self.generate_with_latent(y, rng).map(|(_, x)| x)
    }
}

impl Trainable for Gmvae {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn record_objective(
        &self,
        g: &mut Graph,
        input: &ModelInput,
        rng: &mut dyn rand::RngCore,
        opts: ObjectiveOptions,
    ) -> Result<ObjectiveVars> {
        let x = window_means(&input.frames);
        let noise = self.noise(rng, x.nrows());
        self.record(g, &x, &noise, opts)
    }
}
