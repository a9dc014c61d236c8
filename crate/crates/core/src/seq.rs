//! Building blocks shared by the sequence models: per-modality encoders
//! and decoders, the bidirectional summary encoder, and the forward
//! latent recurrence `h_t = RNN([x_{t−1}, z_{t−1}], h_{t−1})`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dist::{self, GaussianVars};
use crate::graph::{Graph, Var};
use crate::nn::{DenseBlock, LstmCell, LstmState, ParamStore};
use crate::synth::Frames;

/// How the discrete variable is fed forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum YMode {
    /// Gumbel-softmax relaxed sample (training).
    Relaxed,
    /// One-hot of the most probable class (evaluation and generation).
    Hard,
}

/// Which regularizer is applied to `q(y|x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveForm {
    /// `+ H(q(y|x))`.
    Entropy,
    /// `− KL(q(y|x) || Uniform(K))`.
    UniformKl,
}

/// Whether generation draws latents or uses their means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampling {
    Random,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOptions {
    pub temperature: f64,
    pub y_mode: YMode,
    pub form: ObjectiveForm,
    /// Weight on the KL terms of the objective (1 outside warm-up). The
    /// reported terms are always unweighted.
    pub kl_weight: f64,
}

impl ObjectiveOptions {
    pub fn training(temperature: f64) -> Self {
        ObjectiveOptions {
            temperature,
            y_mode: YMode::Relaxed,
            form: ObjectiveForm::Entropy,
            kl_weight: 1.0,
        }
    }

    pub fn evaluation() -> Self {
        ObjectiveOptions {
            temperature: 1.0,
            y_mode: YMode::Hard,
            form: ObjectiveForm::Entropy,
            kl_weight: 1.0,
        }
    }
}

/// Batch-mean objective and its terms. For the supervised classifier the
/// objective is the mean log-likelihood of the labels and the other terms
/// are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub objective: f64,
    pub recon_a: f64,
    pub recon_l: f64,
    pub kl_local: f64,
    pub kl_global: f64,
    /// `H(q(y|x))`, or `−KL(q(y|x)||U)` under [`ObjectiveForm::UniformKl`].
    pub entropy: f64,
}

impl Breakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.objective,
            self.recon_a,
            self.recon_l,
            self.kl_local,
            self.kl_global,
            self.entropy,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn scaled_add(&mut self, other: &Breakdown, w: f64) {
        self.objective += w * other.objective;
        self.recon_a += w * other.recon_a;
        self.recon_l += w * other.recon_l;
        self.kl_local += w * other.kl_local;
        self.kl_global += w * other.kl_global;
        self.entropy += w * other.entropy;
    }
}

impl std::fmt::Display for Breakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "objective={:.6} recon_a={:.6} recon_l={:.6} kl_local={:.6} kl_global={:.6} entropy={:.6}",
            self.objective, self.recon_a, self.recon_l, self.kl_local, self.kl_global, self.entropy
        )
    }
}

/// Scalar nodes making up a recorded objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub objective: Var,
    pub recon_a: Option<Var>,
    pub recon_l: Option<Var>,
    pub kl_local: Option<Var>,
    pub kl_global: Option<Var>,
    pub entropy: Option<Var>,
    pub batch: usize,
}

impl ObjectiveVars {
    pub fn breakdown(&self, g: &Graph) -> Breakdown {
        let n = self.batch as f64;
        let get = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v) / n);
        Breakdown {
            objective: g.scalar(self.objective),
            recon_a: get(self.recon_a),
            recon_l: get(self.recon_l),
            kl_local: get(self.kl_local),
            kl_global: get(self.kl_global),
            entropy: get(self.entropy),
        }
    }
}

/// `w · v`, skipping the multiply when `w = 1`.
pub fn weighted(g: &mut Graph, v: Var, w: f64) -> Var {
    if w == 1.0 {
        v
    } else {
        g.scale(v, w)
    }
}

/// Standard-normal draws for `ticks` steps of an `n`-row batch.
pub fn normal_rows<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
}

/// Gumbel(0, 1) draws.
pub fn gumbel_rows<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, k), |_| {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        dist::gumbel_from_uniform(u)
    })
}

/// Separate joystick and rangefinder perceptrons whose outputs are
/// concatenated into the per-step feature `x_t`.
#[derive(Debug, Clone, Copy)]
pub struct ModalityEncoders {
    pub joystick: DenseBlock,
    pub laser: DenseBlock,
}

impl ModalityEncoders {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        beams: usize,
        hidden: usize,
        joystick_features: usize,
        laser_features: usize,
        rng: &mut R,
    ) -> Self {
        ModalityEncoders {
            joystick: DenseBlock::new(store, "joystick_encoder", 2, hidden, joystick_features, rng),
            laser: DenseBlock::new(store, "laser_encoder", beams, hidden, laser_features, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.joystick.output_dim + self.laser.output_dim
    }

    pub fn encode_step(&self, g: &mut Graph, joystick: Var, laser: Var) -> Var {
        let a = self.joystick.forward(g, joystick);
        let l = self.laser.forward(g, laser);
        g.concat_cols(&[a, l])
    }

    /// Encodes every tick in one pass; returns one `n × d_x` node per tick.
    pub fn encode(&self, g: &mut Graph, frames: &Frames) -> Vec<Var> {
        let n = frames.batch_size();
        let a: Vec<Var> = frames.commands.iter().map(|c| g.constant(c.clone())).collect();
        let l: Vec<Var> = frames.ranges.iter().map(|r| g.constant(r.clone())).collect();
        let a = g.concat_rows(&a);
        let l = g.concat_rows(&l);
        let all = self.encode_step(g, a, l);
        (0..frames.len()).map(|t| g.slice_rows(all, t * n, (t + 1) * n)).collect()
    }
}

/// Joystick and rangefinder heads with fixed-variance Gaussian outputs.
#[derive(Debug, Clone, Copy)]
pub struct ModalityDecoders {
    pub joystick: DenseBlock,
    pub laser: DenseBlock,
}

impl ModalityDecoders {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, input: usize, hidden: usize, beams: usize, rng: &mut R) -> Self {
        ModalityDecoders {
            joystick: DenseBlock::new(store, "joystick_decoder", input, hidden, 2, rng),
            laser: DenseBlock::new(store, "laser_decoder", input, hidden, beams, rng),
        }
    }

    pub fn decode(&self, g: &mut Graph, input: Var) -> (Var, Var) {
        (self.joystick.forward(g, input), self.laser.forward(g, input))
    }
}

/// Fixed-variance reconstruction log-likelihood summed over all rows, for
/// time-major stacked predictions and targets.
pub fn recon_sums(g: &mut Graph, frames: &Frames, joy_mean: Var, laser_mean: Var) -> (Var, Var) {
    let a: Vec<Var> = frames.commands.iter().map(|c| g.constant(c.clone())).collect();
    let l: Vec<Var> = frames.ranges.iter().map(|r| g.constant(r.clone())).collect();
    let a = g.concat_rows(&a);
    let l = g.concat_rows(&l);
    let ra = dist::gaussian_loglik_rows(g, a, joy_mean, dist::DECODER_VARIANCE);
    let rl = dist::gaussian_loglik_rows(g, l, laser_mean, dist::DECODER_VARIANCE);
    (g.sum_all(ra), g.sum_all(rl))
}

/// Forward and backward LSTMs over the whole window, merged by summing the
/// final forward state `h_T` and the final backward state `g_1`.
#[derive(Debug, Clone, Copy)]
pub struct BiEncoder {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, input: usize, state: usize, rng: &mut R) -> Self {
        BiEncoder {
            forward: LstmCell::new(store, "bi_forward", input, state, rng),
            backward: LstmCell::new(store, "bi_backward", input, state, rng),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.forward.state_dim
    }

    pub fn merged(&self, g: &mut Graph, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "bidirectional encoder needs at least one step");
        let n = g.shape(xs[0]).0;
        let mut fwd = self.forward.zero_state(g, n);
        for &x in xs {
            fwd = self.forward.step(g, x, fwd);
        }
        let mut bwd = self.backward.zero_state(g, n);
        for &x in xs.iter().rev() {
            bwd = self.backward.step(g, x, bwd);
        }
        g.add(fwd.h, bwd.h)
    }
}

/// The local latent recurrence shared by the clustered model, the
/// disentangled baseline and the VRNN.
#[derive(Debug, Clone, Copy)]
pub struct LocalChain {
    pub cell: LstmCell,
    /// `q(z_t | x_t, h_t)`.
    pub posterior: DenseBlock,
    /// `p(z_t | h_t)`.
    pub prior: DenseBlock,
    pub latent_dim: usize,
    pub feature_dim: usize,
}

/// One advanced step of the local chain.
#[derive(Debug, Clone, Copy)]
pub struct LocalStep {
    pub state: LstmState,
    pub prior: GaussianVars,
    pub posterior: Option<GaussianVars>,
    pub z: Var,
}

impl LocalChain {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_dim: usize,
        state_dim: usize,
        latent_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        LocalChain {
            cell: LstmCell::new(store, "local_cell", feature_dim + latent_dim, state_dim, rng),
            posterior: DenseBlock::new(store, "q_local", feature_dim + state_dim, hidden, 2 * latent_dim, rng),
            prior: DenseBlock::new(store, "p_local", state_dim, hidden, 2 * latent_dim, rng),
            latent_dim,
            feature_dim,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.cell.state_dim
    }

    /// Zero state, zero previous input and zero previous latent.
    pub fn initial(&self, g: &mut Graph, n: usize) -> (LstmState, Var, Var) {
        let state = self.cell.zero_state(g, n);
        let x0 = g.zeros(n, self.feature_dim);
        let z0 = g.zeros(n, self.latent_dim);
        (state, x0, z0)
    }

    pub fn advance(&self, g: &mut Graph, x_prev: Var, z_prev: Var, state: LstmState) -> LstmState {
        let input = g.concat_cols(&[x_prev, z_prev]);
        self.cell.step(g, input, state)
    }

    pub fn prior_of(&self, g: &mut Graph, h: Var) -> GaussianVars {
        let raw = self.prior.forward(g, h);
        GaussianVars::from_head(g, raw)
    }

    pub fn posterior_of(&self, g: &mut Graph, x: Var, h: Var) -> GaussianVars {
        let joined = g.concat_cols(&[x, h]);
        let raw = self.posterior.forward(g, joined);
        GaussianVars::from_head(g, raw)
    }

    /// Advances the state, then samples `z_t` from the posterior when the
    /// current input is observed and from the prior otherwise. `eps = None`
    /// uses the distribution mean.
    pub fn step(
        &self,
        g: &mut Graph,
        x_prev: Var,
        z_prev: Var,
        state: LstmState,
        x_now: Option<Var>,
        eps: Option<Array2<f64>>,
    ) -> LocalStep {
        let state = self.advance(g, x_prev, z_prev, state);
        let prior = self.prior_of(g, state.h);
        let posterior = x_now.map(|x| self.posterior_of(g, x, state.h));
        let source = posterior.unwrap_or(prior);
        let z = match eps {
            Some(e) => {
                let e = g.constant(e);
                dist::reparam(g, source, e)
            }
            None => source.mean,
        };
        LocalStep {
            state,
            prior,
            posterior,
            z,
        }
    }

    /// Runs the observed window. Returns per-step records.
    pub fn run_observed(
        &self,
        g: &mut Graph,
        xs: &[Var],
        eps: Option<&[Array2<f64>]>,
    ) -> Vec<LocalStep> {
        let n = g.shape(xs[0]).0;
        let (mut state, mut x_prev, mut z_prev) = self.initial(g, n);
        let mut out = Vec::with_capacity(xs.len());
        for (t, &x) in xs.iter().enumerate() {
            let step = self.step(g, x_prev, z_prev, state, Some(x), eps.map(|e| e[t].clone()));
            state = step.state;
            x_prev = x;
            z_prev = step.z;
            out.push(step);
        }
        out
    }

    /// `Σ_t KL(q(z_t|x_t,h_t) || p(z_t|h_t))` over all rows and ticks.
    pub fn kl_sum(&self, g: &mut Graph, steps: &[LocalStep]) -> Var {
        let qm: Vec<Var> = steps.iter().map(|s| s.posterior.expect("observed").mean).collect();
        let qv: Vec<Var> = steps.iter().map(|s| s.posterior.expect("observed").log_var).collect();
        let pm: Vec<Var> = steps.iter().map(|s| s.prior.mean).collect();
        let pv: Vec<Var> = steps.iter().map(|s| s.prior.log_var).collect();
        let q = GaussianVars {
            mean: g.concat_rows(&qm),
            log_var: g.concat_rows(&qv),
        };
        let p = GaussianVars {
            mean: g.concat_rows(&pm),
            log_var: g.concat_rows(&pv),
        };
        let kl = dist::kl_rows(g, q, p);
        g.sum_all(kl)
    }
}
