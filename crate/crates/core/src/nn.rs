//! Parameter storage and the two building blocks every model is made of:
//! a single-hidden-layer ReLU perceptron and an LSTM cell.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::graph::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Rounds every value to the nearest `f32` so that float32 checkpoints
    /// reproduce the in-memory model exactly.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

fn fan_in_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Random `n × n` orthogonal matrix from modified Gram-Schmidt on a
/// Gaussian draw.
pub fn orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let mut m: Array2<f64> = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(rng));
    for j in 0..n {
        for k in 0..j {
            let proj: f64 = m.column(j).dot(&m.column(k));
            let col_k = m.column(k).to_owned();
            m.column_mut(j).scaled_add(-proj, &col_k);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    m
}

/// Single hidden layer with ReLU, linear output.
#[derive(Debug, Clone, Copy)]
pub struct DenseBlock {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl DenseBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w1 = store.add(
            format!("{prefix}.w1"),
            fan_in_uniform(input_dim, hidden_dim, input_dim, rng),
        );
        let b1 = store.add(format!("{prefix}.b1"), Array2::zeros((1, hidden_dim)));
        let w2 = store.add(
            format!("{prefix}.w2"),
            fan_in_uniform(hidden_dim, output_dim, hidden_dim, rng),
        );
        let b2 = store.add(format!("{prefix}.b2"), Array2::zeros((1, output_dim)));
        DenseBlock {
            input_dim,
            hidden_dim,
            output_dim,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        debug_assert_eq!(g.shape(x).1, self.input_dim);
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let pre = g.affine(x, w1, b1);
        let hidden = g.relu(pre);
        g.affine(hidden, w2, b2)
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// LSTM cell. The state is zero at the start of every window.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub input_dim: usize,
    pub state_dim: usize,
    weight: ParamId,
    bias: ParamId,
}

/// Hidden and cell state of an [`LstmCell`].
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Self {
        let h = state_dim;
        let mut w = Array2::zeros((input_dim + h, 4 * h));
        w.slice_mut(s![..input_dim, ..])
            .assign(&fan_in_uniform(input_dim, 4 * h, input_dim, rng));
        for gate in 0..4 {
            w.slice_mut(s![input_dim.., gate * h..(gate + 1) * h])
                .assign(&orthogonal(h, rng));
        }
        let weight = store.add(format!("{prefix}.weight"), w);
        let bias = store.add(format!("{prefix}.bias"), Array2::zeros((1, 4 * h)));
        LstmCell {
            input_dim,
            state_dim,
            weight,
            bias,
        }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> LstmState {
        let h = g.zeros(batch, self.state_dim);
        let c = g.zeros(batch, self.state_dim);
        LstmState { h, c }
    }

    pub fn step(&self, g: &mut Graph, x: Var, state: LstmState) -> LstmState {
        debug_assert_eq!(g.shape(x).1, self.input_dim);
        let joined = g.concat_cols(&[x, state.h]);
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let pre = g.affine(joined, w, b);
        let both = g.lstm_gates(pre, state.c);
        let h = g.slice_cols(both, 0, self.state_dim);
        let c = g.slice_cols(both, self.state_dim, 2 * self.state_dim);
        LstmState { h, c }
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Mean/log-variance table indexed by a (possibly relaxed) one-hot row:
/// `y · means`, `y · log_vars`. Linear in `y`.
#[derive(Debug, Clone, Copy)]
pub struct ComponentTable {
    pub components: usize,
    pub dim: usize,
    means: ParamId,
    log_vars: ParamId,
}

impl ComponentTable {
    /// Component means start as independent standard-normal draws so the
    /// mixture is not degenerate at initialization; log-variances start at 0.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        components: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let means = Array2::from_shape_fn((components, dim), |_| StandardNormal.sample(rng));
        let means = store.add(format!("{prefix}.means"), means);
        let log_vars = store.add(format!("{prefix}.log_vars"), Array2::zeros((components, dim)));
        ComponentTable {
            components,
            dim,
            means,
            log_vars,
        }
    }

    pub fn means_id(&self) -> ParamId {
        self.means
    }

    pub fn log_vars_id(&self) -> ParamId {
        self.log_vars
    }

    pub fn lookup(&self, g: &mut Graph, y: Var) -> (Var, Var) {
        let (m, lv) = (g.param(self.means), g.param(self.log_vars));
        (g.matmul(y, m), g.matmul(y, lv))
    }
}

/// One-hot rows for the given class indices.
pub fn one_hot(indices: &[usize], classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), classes));
    for (r, &c) in indices.iter().enumerate() {
        out[[r, c]] = 1.0;
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn row_argmax(m: &Array2<f64>) -> Vec<usize> {
    m.rows().into_iter().map(argmax).collect()
}

pub fn to_rows(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(ndarray::Axis(0))
}
