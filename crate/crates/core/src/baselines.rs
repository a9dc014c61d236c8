//! Comparison models: a variational RNN with one latent per step and a
//! supervised bidirectional LSTM classifier. The disentangled baseline
//! without clusters is [`crate::discvae::Discvae`] built with
//! [`ModelKind::Dseqvae`].

use ndarray::Array2;
use rand::Rng;

use crate::discvae::{Rollout, RolloutStep};
use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::model::{ModelConfig, ModelInput, ModelKind, Trainable};
use crate::nn::{DenseBlock, ParamStore};
use crate::seq::{self, BiEncoder, LocalChain, LocalStep, ModalityDecoders, ModalityEncoders, ObjectiveOptions, ObjectiveVars,
    Sampling};
use crate::synth::Frames;

/// Variational RNN: `h_t = RNN([x_{t−1}, z_{t−1}], h_{t−1})`,
/// `p(z_t|h_t)`, `q(z_t|x_t,h_t)`, `p(x_t|z_t,h_t)`.
#[derive(Debug, Clone)]
pub struct Vrnn {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoders: ModalityEncoders,
    pub chain: LocalChain,
    pub decoders: ModalityDecoders,
}

impl Vrnn {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        ensure!(config.kind == ModelKind::Vrnn, "model kind {} is not a VRNN", config.kind);
        let mut params = ParamStore::new();
        let encoders = ModalityEncoders::new(
            &mut params,
            config.beams,
            config.hidden,
            config.joystick_features,
            config.laser_features,
            rng,
        );
        let chain = LocalChain::new(
            &mut params,
            encoders.feature_dim(),
            config.local_state,
            config.dim_local,
            config.hidden,
            rng,
        );
        let decoders = ModalityDecoders::new(&mut params, config.dim_local + config.local_state, config.hidden, config.beams, rng);
        params.round_to_f32();
        Ok(Vrnn {
            config,
            params,
            encoders,
            chain,
            decoders,
        })
    }

    fn check_frames(&self, frames: &Frames) -> Result<()> {
        ensure!(!frames.is_empty() && frames.batch_size() >= 1, "batch must be non-empty");
        ensure!(
            frames.beams() == self.config.beams,
            "frames have {} beams, model expects {}",
            frames.beams(),
            self.config.beams
        );
        Ok(())
    }

    pub fn noise<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, ticks: usize) -> Vec<Array2<f64>> {
        (0..ticks).map(|_| seq::normal_rows(rng, n, self.config.dim_local)).collect()
    }

    pub fn decode_step(&self, g: &mut Graph, z: Var, h: Var) -> (Var, Var) {
        let input = g.concat_cols(&[z, h]);
        self.decoders.decode(g, input)
    }

    /// Runs the observed window and returns the per-step records.
    pub fn steps(&self, g: &mut Graph, frames: &Frames, eps: Option<&[Array2<f64>]>) -> Result<Vec<LocalStep>> {
        self.check_frames(frames)?;
        let xs = self.encoders.encode(g, frames);
        Ok(self.chain.run_observed(g, &xs, eps))
    }

    /// Records the batch mean of `Σ_t [log p(x_t|z_t,h_t) − KL(q(z_t|·) || p(z_t|h_t))]`.
    pub fn record(&self, g: &mut Graph, frames: &Frames, eps: &[Array2<f64>]) -> Result<ObjectiveVars> {
        self.record_weighted(g, frames, eps, 1.0)
    }

    /// [`Vrnn::record`] with the KL term scaled by `kl_weight`.
    pub fn record_weighted(&self, g: &mut Graph, frames: &Frames, eps: &[Array2<f64>], kl_weight: f64) -> Result<ObjectiveVars> {
        ensure!(eps.len() == frames.len(), "noise does not match the batch");
        let steps = self.steps(g, frames, Some(eps))?;
        self.record_from_steps(g, frames, &steps, kl_weight)
    }

    pub fn record_from_steps(&self, g: &mut Graph, frames: &Frames, steps: &[LocalStep], kl_weight: f64) -> Result<ObjectiveVars> {
        let n = frames.batch_size();
        let hs: Vec<Var> = steps.iter().map(|s| s.state.h).collect();
        let zs: Vec<Var> = steps.iter().map(|s| s.z).collect();
        let h_all = g.concat_rows(&hs);
        let z_all = g.concat_rows(&zs);
        let (joy, laser) = self.decode_step(g, z_all, h_all);
        let (recon_a, recon_l) = seq::recon_sums(g, frames, joy, laser);
        let kl_local = self.chain.kl_sum(g, steps);
        let total = g.add(recon_a, recon_l);
        let wl = seq::weighted(g, kl_local, kl_weight);
        let total = g.sub(total, wl);
        let objective = g.scale(total, 1.0 / n as f64);
        Ok(ObjectiveVars {
            objective,
            recon_a: Some(recon_a),
            recon_l: Some(recon_l),
            kl_local: Some(kl_local),
            kl_global: None,
            entropy: None,
            batch: n,
        })
    }

    pub fn elbo<R: Rng + ?Sized>(&self, frames: &Frames, rng: &mut R) -> Result<crate::seq::Breakdown> {
        let eps = self.noise(rng, frames.batch_size(), frames.len());
        let mut g = Graph::with_params(&self.params);
        let vars = self.record(&mut g, frames, &eps)?;
        Ok(vars.breakdown(&g))
    }

    /// Posterior mean of the last step's latent, with posterior means fed
    /// through the recurrence.
    pub fn last_posterior_mean(&self, frames: &Frames) -> Result<Array2<f64>> {
        let mut g = Graph::with_params(&self.params);
        let steps = self.steps(&mut g, frames, None)?;
        let last = steps.last().expect("non-empty window");
        Ok(g.value(last.posterior.expect("observed").mean).clone())
    }

    /// Filters the prefix through the posterior, then samples `n` steps
    /// from the prior, feeding decoded means back as inputs.
    pub fn predict_rollout<R: Rng + ?Sized>(&self, prefix: &Frames, n: usize, rng: &mut R) -> Result<Rollout> {
        self.predict_rollout_with(prefix, n, rng, Sampling::Random)
    }

    pub fn predict_rollout_with<R: Rng + ?Sized>(
        &self,
        prefix: &Frames,
        n: usize,
        rng: &mut R,
        sampling: Sampling,
    ) -> Result<Rollout> {
        ensure!(n >= 1, "rollout horizon must be at least 1");
        self.check_frames(prefix)?;
        let batch = prefix.batch_size();
        let random = sampling == Sampling::Random;
        let eps_prefix = random.then(|| self.noise(rng, batch, prefix.len()));
        let mut g = Graph::with_params(&self.params);
        let xs = self.encoders.encode(&mut g, prefix);
        let observed = self.chain.run_observed(&mut g, &xs, eps_prefix.as_deref());
        let last = observed.last().expect("non-empty prefix");
        let (mut state, mut z_prev) = (last.state, last.z);
        let mut x_prev = *xs.last().expect("non-empty prefix");
        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            let eps = random.then(|| seq::normal_rows(rng, batch, self.config.dim_local));
            let step = self.chain.step(&mut g, x_prev, z_prev, state, None, eps);
            let (joy, laser) = self.decode_step(&mut g, step.z, step.state.h);
            steps.push(RolloutStep {
                joystick: g.value(joy).clone(),
                laser: g.value(laser).clone(),
                z_local: g.value(step.z).clone(),
                z_global: Array2::zeros((batch, 0)),
                h: g.value(step.state.h).clone(),
            });
            state = step.state;
            z_prev = step.z;
            x_prev = self.encoders.encode_step(&mut g, joy, laser);
        }
        Ok(Rollout {
            clusters: vec![0; batch],
            z_global: Array2::zeros((batch, 0)),
            steps,
        })
    }
}

impl Trainable for Vrnn {
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
        let eps = self.noise(rng, input.frames.batch_size(), input.frames.len());
        self.record_weighted(g, &input.frames, &eps, opts.kl_weight)
    }
}

/// Bidirectional LSTM over the encoded window with a softmax head over the
/// window classes.
#[derive(Debug, Clone)]
pub struct BilstmClassifier {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoders: ModalityEncoders,
    pub bi: BiEncoder,
    pub head: DenseBlock,
}

impl BilstmClassifier {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        ensure!(config.kind == ModelKind::Bilstm, "model kind {} is not a classifier", config.kind);
        let mut params = ParamStore::new();
        let encoders = ModalityEncoders::new(
            &mut params,
            config.beams,
            config.hidden,
            config.joystick_features,
            config.laser_features,
            rng,
        );
        let bi = BiEncoder::new(&mut params, encoders.feature_dim(), config.global_state, rng);
        let head = DenseBlock::new(&mut params, "classifier", config.global_state, config.hidden, config.classes, rng);
        params.round_to_f32();
        Ok(BilstmClassifier {
            config,
            params,
            encoders,
            bi,
            head,
        })
    }

    fn check_frames(&self, frames: &Frames) -> Result<()> {
        ensure!(!frames.is_empty() && frames.batch_size() >= 1, "batch must be non-empty");
        ensure!(frames.beams() == self.config.beams, "beam count mismatch");
        Ok(())
    }

    fn merged_node(&self, g: &mut Graph, frames: &Frames) -> Result<Var> {
        self.check_frames(frames)?;
        let xs = self.encoders.encode(g, frames);
        Ok(self.bi.merged(g, &xs))
    }

    pub fn logits_node(&self, g: &mut Graph, frames: &Frames) -> Result<Var> {
        let m = self.merged_node(g, frames)?;
        Ok(self.head.forward(g, m))
    }

    /// Class distribution per window.
    pub fn classify(&self, frames: &Frames) -> Result<Array2<f64>> {
        let mut g = Graph::with_params(&self.params);
        let l = self.logits_node(&mut g, frames)?;
        let p = g.softmax(l);
        Ok(g.value(p).clone())
    }

    pub fn predict(&self, frames: &Frames) -> Result<Vec<usize>> {
        Ok(crate::nn::row_argmax(&self.classify(frames)?))
    }

    pub fn merged_state(&self, frames: &Frames) -> Result<Array2<f64>> {
        let mut g = Graph::with_params(&self.params);
        let m = self.merged_node(&mut g, frames)?;
        Ok(g.value(m).clone())
    }

    /// Records the mean log-likelihood of the labels.
    pub fn record(&self, g: &mut Graph, frames: &Frames, classes: &[usize]) -> Result<ObjectiveVars> {
        ensure!(classes.len() == frames.batch_size(), "one label per window required");
        ensure!(
            classes.iter().all(|&c| c < self.config.classes),
            "label out of range"
        );
        let n = classes.len();
        let l = self.logits_node(g, frames)?;
        let lp = g.log_softmax(l);
        let mask = g.constant(crate::nn::one_hot(classes, self.config.classes));
        let picked = g.mul(lp, mask);
        let total = g.sum_all(picked);
        let objective = g.scale(total, 1.0 / n as f64);
        Ok(ObjectiveVars {
            objective,
            recon_a: None,
            recon_l: None,
            kl_local: None,
            kl_global: None,
            entropy: None,
            batch: n,
        })
    }
}

impl Trainable for BilstmClassifier {
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
        _rng: &mut dyn rand::RngCore,
        _opts: ObjectiveOptions,
    ) -> Result<ObjectiveVars> {
        self.record(g, &input.frames, &input.classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frames(rng: &mut ChaCha8Rng, n: usize, t: usize, beams: usize) -> Frames {
        Frames {
            commands: (0..t).map(|_| seq::normal_rows(rng, n, 2)).collect(),
            ranges: (0..t).map(|_| seq::normal_rows(rng, n, beams)).collect(),
        }
    }

    fn small(kind: ModelKind) -> ModelConfig {
        let mut c = ModelConfig::desk(kind);
        c.beams = 4;
        c.hidden = 8;
        c.global_state = 6;
        c.local_state = 5;
        c.laser_features = 4;
        c.joystick_features = 2;
        c
    }

    #[test]
    fn classifier_outputs_are_on_the_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = BilstmClassifier::new(small(ModelKind::Bilstm), &mut rng).unwrap();
        let p = m.classify(&frames(&mut rng, 3, 5, 4)).unwrap();
        assert_eq!(p.ncols(), 12);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn vrnn_rollout_has_horizon_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Vrnn::new(small(ModelKind::Vrnn), &mut rng).unwrap();
        let f = frames(&mut rng, 2, 4, 4);
        let r = m.predict_rollout(&f, 3, &mut rng).unwrap();
        assert_eq!(r.steps.len(), 3);
        assert_eq!(r.steps[0].laser.dim(), (2, 4));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Vrnn::new(small(ModelKind::Bilstm), &mut rng).is_err());
        assert!(BilstmClassifier::new(small(ModelKind::Vrnn), &mut rng).is_err());
    }
}
