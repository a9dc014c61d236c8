//! The sequence clustering model. A time-invariant global latent `z_G`
//! with a Gaussian-mixture prior `p(z_G|y)` over the discrete variable `y`,
//! and per-step local latents `z_{t,L}` with priors `p(z_{t,L}|h_t)` from a
//! forward recurrence. The decoders see `[z_G, z_{t,L}, h_t]`.
//!
//! With [`ModelKind::Dseqvae`] the same network is built with a fixed
//! `N(0, I)` global prior, no `q(y|x)` head and a constant `y = [1]`.

use ndarray::Array2;
use rand::Rng;

use crate::dist::{self, GaussianVars};
use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::model::{ModelConfig, ModelInput, ModelKind, Trainable};
use crate::nn::{self, ComponentTable, DenseBlock, ParamStore};
use crate::seq::{
    self, BiEncoder, LocalChain, LocalStep, ModalityDecoders, ModalityEncoders, ObjectiveForm, ObjectiveOptions,
    ObjectiveVars, Sampling, YMode,
};
use crate::synth::Frames;

#[derive(Debug, Clone)]
pub struct Discvae {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoders: ModalityEncoders,
    pub bi: BiEncoder,
    /// Absent for the standard-prior variant.
    pub q_y: Option<DenseBlock>,
    pub q_global: DenseBlock,
    /// Absent for the standard-prior variant.
    pub p_global: Option<ComponentTable>,
    pub local: LocalChain,
    pub decoders: ModalityDecoders,
}

/// Noise for one objective evaluation, drawn in a fixed order.
#[derive(Debug, Clone)]
pub struct SequenceNoise {
    /// Gumbel(0,1), `n × K` (`n × 1` for the standard-prior variant).
    pub gumbel: Array2<f64>,
    pub eps_global: Array2<f64>,
    pub eps_local: Vec<Array2<f64>>,
}

/// Graph nodes of a recorded forward pass.
#[derive(Debug, Clone)]
pub struct LatentTrace {
    pub merged: Var,
    /// `q(y|x)` logits; `None` for the standard-prior variant.
    pub logits: Option<Var>,
    pub y: Var,
    pub q_global: GaussianVars,
    pub p_global: GaussianVars,
    pub z_global: Var,
    pub steps: Vec<LocalStep>,
    /// Time-major stacked decoder means, `(T·n) × 2` and `(T·n) × B`.
    pub joystick_mean: Var,
    pub laser_mean: Var,
}

/// One autoregressive rollout of `n` future steps for a batch of prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Component used per prefix.
    pub clusters: Vec<usize>,
    /// The single global sample per prefix, `batch × dim_G`.
    pub z_global: Array2<f64>,
    pub steps: Vec<RolloutStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    /// Decoded joystick mean, normalized units.
    pub joystick: Array2<f64>,
    /// Decoded range mean, normalized units.
    pub laser: Array2<f64>,
    pub z_local: Array2<f64>,
    /// Global latent fed to the decoders at this step.
    pub z_global: Array2<f64>,
    pub h: Array2<f64>,
}

impl Discvae {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        ensure!(
            matches!(config.kind, ModelKind::Discvae | ModelKind::Dseqvae),
            "model kind {} is not a disentangled sequence model",
            config.kind
        );
        let mixture = config.kind == ModelKind::Discvae;
        let k = if mixture { config.clusters } else { 1 };
        let mut params = ParamStore::new();
        let encoders = ModalityEncoders::new(
            &mut params,
            config.beams,
            config.hidden,
            config.joystick_features,
            config.laser_features,
            rng,
        );
        let dx = encoders.feature_dim();
        let bi = BiEncoder::new(&mut params, dx, config.global_state, rng);
        let q_y = mixture.then(|| DenseBlock::new(&mut params, "q_y", config.global_state, config.hidden, k, rng));
        let q_global = DenseBlock::new(
            &mut params,
            "q_global",
            config.global_state + k,
            config.hidden,
            2 * config.dim_global,
            rng,
        );
        let p_global = mixture.then(|| ComponentTable::new(&mut params, "p_global", k, config.dim_global, rng));
        let local = LocalChain::new(&mut params, dx, config.local_state, config.dim_local, config.hidden, rng);
        let decoders = ModalityDecoders::new(
            &mut params,
            config.dim_global + config.dim_local + config.local_state,
            config.hidden,
            config.beams,
            rng,
        );
        params.round_to_f32();
        Ok(Discvae {
            config,
            params,
            encoders,
            bi,
            q_y,
            q_global,
            p_global,
            local,
            decoders,
        })
    }

    pub fn is_mixture(&self) -> bool {
        self.p_global.is_some()
    }

    /// Width of `y`.
    pub fn components(&self) -> usize {
        self.p_global.map_or(1, |t| t.components)
    }

    pub fn noise<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, ticks: usize) -> SequenceNoise {
        let gumbel = seq::gumbel_rows(rng, n, self.components());
        let eps_global = seq::normal_rows(rng, n, self.config.dim_global);
        let eps_local = (0..ticks)
            .map(|_| seq::normal_rows(rng, n, self.config.dim_local))
            .collect();
        SequenceNoise {
            gumbel,
            eps_global,
            eps_local,
        }
    }

    fn check_frames(&self, frames: &Frames) -> Result<()> {
        ensure!(!frames.is_empty(), "sequence must have at least one step");
        ensure!(frames.batch_size() >= 1, "batch must be non-empty");
        ensure!(
            frames.beams() == self.config.beams,
            "frames have {} beams, model expects {}",
            frames.beams(),
            self.config.beams
        );
        Ok(())
    }

    /// Sum of the final forward and backward summary states.
    pub fn encode_global(&self, g: &mut Graph, xs: &[Var]) -> Var {
        self.bi.merged(g, xs)
    }

    /// `q(y|x)` logits from the merged summary state.
    pub fn infer_y(&self, g: &mut Graph, merged: Var) -> Option<Var> {
        self.q_y.map(|head| head.forward(g, merged))
    }

    /// `q(z_G | x, y)` and a reparameterized sample (`eps = None` → mean).
    pub fn infer_global(&self, g: &mut Graph, merged: Var, y: Var, eps: Option<Array2<f64>>) -> (GaussianVars, Var) {
        let joined = g.concat_cols(&[merged, y]);
        let raw = self.q_global.forward(g, joined);
        let q = GaussianVars::from_head(g, raw);
        let z = match eps {
            Some(e) => {
                let e = g.constant(e);
                dist::reparam(g, q, e)
            }
            None => q.mean,
        };
        (q, z)
    }

    /// `p(z_G | y)`; `N(0, I)` for the standard-prior variant.
    pub fn global_prior(&self, g: &mut Graph, y: Var) -> GaussianVars {
        match self.p_global {
            Some(table) => {
                let (m, lv) = table.lookup(g, y);
                GaussianVars::new(g, m, lv)
            }
            None => {
                let n = g.shape(y).0;
                let mean = g.zeros(n, self.config.dim_global);
                let log_var = g.zeros(n, self.config.dim_global);
                GaussianVars { mean, log_var }
            }
        }
    }

    /// Joystick and range means for `[z_G, z_{t,L}, h_t]`.
    pub fn decode_step(&self, g: &mut Graph, z_global: Var, z_local: Var, h: Var) -> (Var, Var) {
        let input = g.concat_cols(&[z_global, z_local, h]);
        self.decoders.decode(g, input)
    }

    fn select_y(&self, g: &mut Graph, logits: Option<Var>, gumbel: &Array2<f64>, opts: &ObjectiveOptions) -> Result<Var> {
        let Some(logits) = logits else {
            let n = gumbel.nrows();
            return Ok(g.constant(Array2::ones((n, 1))));
        };
        Ok(match opts.y_mode {
            YMode::Relaxed => {
                ensure!(opts.temperature > 0.0, "temperature must be positive");
                dist::gumbel_softmax(g, logits, gumbel.clone(), opts.temperature)
            }
            YMode::Hard => {
                let idx = nn::row_argmax(g.value(logits));
                g.constant(nn::one_hot(&idx, self.components()))
            }
        })
    }

    /// Full forward pass over observed windows.
    pub fn trace(&self, g: &mut Graph, frames: &Frames, noise: &SequenceNoise, opts: ObjectiveOptions) -> Result<LatentTrace> {
        self.check_frames(frames)?;
        let n = frames.batch_size();
        ensure!(
            noise.eps_local.len() == frames.len() && noise.gumbel.nrows() == n,
            "noise does not match the batch"
        );
        let xs = self.encoders.encode(g, frames);
        let merged = self.encode_global(g, &xs);
        let logits = self.infer_y(g, merged);
        let y = self.select_y(g, logits, &noise.gumbel, &opts)?;
        let (q_global, z_global) = self.infer_global(g, merged, y, Some(noise.eps_global.clone()));
        let p_global = self.global_prior(g, y);
        let steps = self.local.run_observed(g, &xs, Some(&noise.eps_local));
        let t_len = frames.len();
        let hs: Vec<Var> = steps.iter().map(|s| s.state.h).collect();
        let zs: Vec<Var> = steps.iter().map(|s| s.z).collect();
        let h_all = g.concat_rows(&hs);
        let z_all = g.concat_rows(&zs);
        let zg_all = g.concat_rows(&vec![z_global; t_len]);
        let (joystick_mean, laser_mean) = self.decode_step(g, zg_all, z_all, h_all);
        Ok(LatentTrace {
            merged,
            logits,
            y,
            q_global,
            p_global,
            z_global,
            steps,
            joystick_mean,
            laser_mean,
        })
    }

    /// Records the batch mean of
    /// `Σ_t [log p(x_t|·) − KL_local,t] − KL_global + H(q(y|x))`.
    pub fn record(&self, g: &mut Graph, frames: &Frames, noise: &SequenceNoise, opts: ObjectiveOptions) -> Result<ObjectiveVars> {
        let tr = self.trace(g, frames, noise, opts)?;
        self.record_from_trace(g, frames, &tr, opts)
    }

    pub fn record_from_trace(
        &self,
        g: &mut Graph,
        frames: &Frames,
        tr: &LatentTrace,
        opts: ObjectiveOptions,
    ) -> Result<ObjectiveVars> {
        let n = frames.batch_size();
        let (recon_a, recon_l) = seq::recon_sums(g, frames, tr.joystick_mean, tr.laser_mean);
        let kl_local = self.local.kl_sum(g, &tr.steps);
        let kl_global = dist::kl_rows(g, tr.q_global, tr.p_global);
        let kl_global = g.sum_all(kl_global);
        let mut total = g.add(recon_a, recon_l);
        let wl = seq::weighted(g, kl_local, opts.kl_weight);
        let wg = seq::weighted(g, kl_global, opts.kl_weight);
        total = g.sub(total, wl);
        total = g.sub(total, wg);
        let entropy = match tr.logits {
            Some(logits) => {
                let reg = match opts.form {
                    ObjectiveForm::Entropy => dist::entropy_rows(g, logits),
                    ObjectiveForm::UniformKl => {
                        let k = dist::kl_uniform_rows(g, logits);
                        g.neg(k)
                    }
                };
                let reg = g.sum_all(reg);
                total = g.add(total, reg);
                Some(reg)
            }
            None => None,
        };
        let objective = g.scale(total, 1.0 / n as f64);
        Ok(ObjectiveVars {
            objective,
            recon_a: Some(recon_a),
            recon_l: Some(recon_l),
            kl_local: Some(kl_local),
            kl_global: Some(kl_global),
            entropy,
            batch: n,
        })
    }

    /// Value-level objective with fresh draws.
    pub fn elbo<R: Rng + ?Sized>(&self, frames: &Frames, rng: &mut R, opts: ObjectiveOptions) -> Result<crate::seq::Breakdown> {
        let noise = self.noise(rng, frames.batch_size(), frames.len());
        let mut g = Graph::with_params(&self.params);
        let vars = self.record(&mut g, frames, &noise, opts)?;
        Ok(vars.breakdown(&g))
    }

    fn merged_node(&self, g: &mut Graph, frames: &Frames) -> Result<Var> {
        self.check_frames(frames)?;
        let xs = self.encoders.encode(g, frames);
        Ok(self.encode_global(g, &xs))
    }

    /// Merged summary state per window.
    pub fn merged_state(&self, frames: &Frames) -> Result<Array2<f64>> {
        let mut g = Graph::with_params(&self.params);
        let m = self.merged_node(&mut g, frames)?;
        Ok(g.value(m).clone())
    }

    /// `q(y|x)` logits per window; a zero column for the standard-prior
    /// variant.
    pub fn cluster_logits(&self, frames: &Frames) -> Result<Array2<f64>> {
        let mut g = Graph::with_params(&self.params);
        let m = self.merged_node(&mut g, frames)?;
        Ok(match self.infer_y(&mut g, m) {
            Some(l) => g.value(l).clone(),
            None => Array2::zeros((frames.batch_size(), 1)),
        })
    }

    /// `q(y|x)` per window.
    pub fn cluster_probs(&self, frames: &Frames) -> Result<Array2<f64>> {
        let logits = self.cluster_logits(frames)?;
        let mut out = logits.clone();
        for (mut row, l) in out.rows_mut().into_iter().zip(logits.rows()) {
            row.assign(&dist::softmax(&l.to_owned()));
        }
        Ok(out)
    }

    /// Most probable component per window; ties go to the lowest index.
    pub fn assign_cluster(&self, frames: &Frames) -> Vec<usize> {
        self.cluster_logits(frames)
            .map(|l| nn::row_argmax(&l))
            .unwrap_or_default()
    }

    /// Posterior mean of `z_G` under the hard assignment.
    pub fn global_embedding(&self, frames: &Frames) -> Result<Array2<f64>> {
        let mut g = Graph::with_params(&self.params);
        let m = self.merged_node(&mut g, frames)?;
        let n = frames.batch_size();
        let y = match self.infer_y(&mut g, m) {
            Some(l) => {
                let idx = nn::row_argmax(g.value(l));
                g.constant(nn::one_hot(&idx, self.components()))
            }
            None => g.constant(Array2::ones((n, 1))),
        };
        let (q, _) = self.infer_global(&mut g, m, y, None);
        Ok(g.value(q.mean).clone())
    }

    /// Autoregressive prediction of `n` steps after each prefix.
    ///
    /// The component is the most probable one unless `override_cluster` is
    /// given. One `z_G ~ p(z_G|y=c)` is drawn per prefix and held fixed; the
    /// prefix is filtered through the local posterior; each future step then
    /// advances the recurrence, samples `z_{i,L} ~ p(z_{i,L}|h_i)`, decodes,
    /// and feeds the decoded means back as the next input. The
    /// standard-prior variant has no components and draws `z_G` from its
    /// posterior instead.
    pub fn predict_rollout<R: Rng + ?Sized>(
        &self,
        prefix: &Frames,
        n: usize,
        rng: &mut R,
        override_cluster: Option<usize>,
    ) -> Result<Rollout> {
        self.predict_rollout_with(prefix, n, rng, override_cluster, Sampling::Random)
    }

    /// [`Discvae::predict_rollout`] with a choice between sampled latents
    /// and latent means. With [`Sampling::Mean`] the rng is not used.
    pub fn predict_rollout_with<R: Rng + ?Sized>(
        &self,
        prefix: &Frames,
        n: usize,
        rng: &mut R,
        override_cluster: Option<usize>,
        sampling: Sampling,
    ) -> Result<Rollout> {
        ensure!(n >= 1, "rollout horizon must be at least 1");
        self.check_frames(prefix)?;
        let k = self.components();
        if let Some(c) = override_cluster {
            ensure!(self.is_mixture(), "the standard-prior variant has no components to override");
            ensure!(c < k, "cluster {c} out of range for K = {k}");
        }
        let batch = prefix.batch_size();
        let random = sampling == Sampling::Random;
        let eps_global = random.then(|| seq::normal_rows(rng, batch, self.config.dim_global));
        let eps_prefix: Option<Vec<Array2<f64>>> = random.then(|| {
            (0..prefix.len())
                .map(|_| seq::normal_rows(rng, batch, self.config.dim_local))
                .collect()
        });

        let mut g = Graph::with_params(&self.params);
        let xs = self.encoders.encode(&mut g, prefix);
        let merged = self.encode_global(&mut g, &xs);
        let (clusters, z_global) = match self.infer_y(&mut g, merged) {
            Some(logits) => {
                let clusters = match override_cluster {
                    Some(c) => vec![c; batch],
                    None => nn::row_argmax(g.value(logits)),
                };
                let y = g.constant(nn::one_hot(&clusters, k));
                let prior = self.global_prior(&mut g, y);
                let z = match eps_global {
                    Some(e) => {
                        let e = g.constant(e);
                        dist::reparam(&mut g, prior, e)
                    }
                    None => prior.mean,
                };
                (clusters, z)
            }
            None => {
                let y = g.constant(Array2::ones((batch, 1)));
                let (_, z) = self.infer_global(&mut g, merged, y, eps_global);
                (vec![0; batch], z)
            }
        };

        let observed = self.local.run_observed(&mut g, &xs, eps_prefix.as_deref());
        let last = observed.last().expect("non-empty prefix");
        let mut state = last.state;
        let mut z_prev = last.z;
        let mut x_prev = *xs.last().expect("non-empty prefix");
        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            let eps = random.then(|| seq::normal_rows(rng, batch, self.config.dim_local));
            let step = self.local.step(&mut g, x_prev, z_prev, state, None, eps);
            let (joy, laser) = self.decode_step(&mut g, z_global, step.z, step.state.h);
            steps.push(RolloutStep {
                joystick: g.value(joy).clone(),
                laser: g.value(laser).clone(),
                z_local: g.value(step.z).clone(),
                z_global: g.value(z_global).clone(),
                h: g.value(step.state.h).clone(),
            });
            state = step.state;
            z_prev = step.z;
            x_prev = self.encoders.encode_step(&mut g, joy, laser);
        }
        Ok(Rollout {
            clusters,
            z_global: g.value(z_global).clone(),
            steps,
        })
    }
}

impl Trainable for Discvae {
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
        let noise = self.noise(rng, input.frames.batch_size(), input.frames.len());
        self.record(g, &input.frames, &noise, opts)
    }
}
