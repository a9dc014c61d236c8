//! A small reverse-mode automatic differentiation tape over row-major
//! `f64` matrices.
//!
//! Every value is a 2-D array whose rows index the batch. Binary
//! elementwise ops broadcast their right operand when it has a single row,
//! a single column, or both. Nodes are appended in evaluation order, so the
//! backward sweep is a plain reverse iteration.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use crate::nn::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    SumCols(Var),
    SumAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LstmGates(Var, Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Evaluation tape. Parameters of the store it was built from occupy the
/// first nodes, so `ParamId(i)` maps to node `i`.
pub struct Graph {
    nodes: Vec<Node>,
    n_params: usize,
}

/// Gradients of a scalar with respect to every parameter of the store.
pub struct Gradients {
    pub grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

fn broadcast_to(b: &Array2<f64>, shape: (usize, usize)) -> ArrayView2<'_, f64> {
    b.broadcast(shape)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", b.dim(), shape))
        .into_dimensionality()
        .expect("2-D broadcast")
}

/// Sums a gradient down to the shape of a broadcast operand.
fn reduce_to(grad: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = grad.clone();
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn row_log_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Graph {
    /// Empty tape with no parameters.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
            n_params: 0,
        }
    }

    /// Tape whose first nodes are the trainable parameters of `store`.
    pub fn with_params(store: &ParamStore) -> Self {
        let mut g = Graph::new();
        for value in store.values() {
            g.nodes.push(Node {
                value: value.clone(),
                op: Op::Leaf,
                needs_grad: true,
            });
        }
        g.n_params = store.len();
        g
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.0 < self.n_params, "parameter {} not on this graph", id.0);
        Var(id.0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "not a scalar node");
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: if needs_grad { op } else { Op::Leaf },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Array2::zeros((rows, cols)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av + &broadcast_to(bv, av.dim());
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av - &broadcast_to(bv, av.dim());
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av * &broadcast_to(bv, av.dim());
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x · w + bias` with the bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let mut out = self.value(x).dot(self.value(w));
        out += &broadcast_to(self.value(bias), out.dim());
        self.push(out, Op::Affine(x, w, bias), &[x, w, bias])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * v);
        self.push(out, Op::Square(a), &[a])
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = concatenate(Axis(1), &views).expect("row counts differ in concat_cols");
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = concatenate(Axis(0), &views).expect("column counts differ in concat_rows");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a, start, end), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start, end), &[a])
    }

    /// Per-row sum, giving an `n × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = row_softmax(self.value(a));
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = row_log_softmax(self.value(a));
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Fused LSTM gate nonlinearity. `pre` holds the `n × 4H` pre-activations
    /// in (input, forget, cell, output) order and `cell` the `n × H` previous
    /// cell state. Returns `n × 2H` holding `[h_next, c_next]`.
    pub fn lstm_gates(&mut self, pre: Var, cell: Var) -> Var {
        let p = self.value(pre);
        let c = self.value(cell);
        let (n, four_h) = p.dim();
        let h = four_h / 4;
        assert_eq!(c.dim(), (n, h), "lstm cell state shape");
        let mut out = Array2::zeros((n, 2 * h));
        for r in 0..n {
            for j in 0..h {
                let i_g = sigmoid(p[[r, j]]);
                let f_g = sigmoid(p[[r, h + j]]);
                let g_g = p[[r, 2 * h + j]].tanh();
                let o_g = sigmoid(p[[r, 3 * h + j]]);
                let c_next = f_g * c[[r, j]] + i_g * g_g;
                out[[r, h + j]] = c_next;
                out[[r, j]] = o_g * c_next.tanh();
            }
        }
        self.push(out, Op::LstmGates(pre, cell), &[pre, cell])
    }

    /// Reverse sweep from a scalar node. Returns gradients for every
    /// parameter node; parameters the output does not depend on get zeros.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if idx < self.n_params {
                grads[idx] = Some(grad);
                continue;
            }
            self.propagate(&node.op, &node.value, &grad, &mut grads);
        }

        let grads = (0..self.n_params)
            .map(|i| {
                grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Array2::zeros(self.nodes[i].value.dim()))
            })
            .collect();
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Array2<f64>,
        grad: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, grad.clone());
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, b, reduce_to(grad, self.shape(b)));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, grad.clone());
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, b, -reduce_to(grad, self.shape(b)));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, a, grad * &broadcast_to(bv, grad.dim()));
                }
                if self.nodes[b.0].needs_grad {
                    let full = grad * av;
                    self.accumulate(grads, b, reduce_to(&full, bv.dim()));
                }
            }
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, a, grad.dot(&self.value(b).t()));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, b, self.value(a).t().dot(grad));
                }
            }
            Op::Affine(x, w, bias) => {
                if self.nodes[x.0].needs_grad {
                    self.accumulate(grads, x, grad.dot(&self.value(w).t()));
                }
                if self.nodes[w.0].needs_grad {
                    self.accumulate(grads, w, self.value(x).t().dot(grad));
                }
                if self.nodes[bias.0].needs_grad {
                    self.accumulate(grads, bias, reduce_to(grad, self.shape(bias)));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, a, grad * f),
            Op::AddScalar(a) => self.accumulate(grads, a, grad.clone()),
            Op::Exp(a) => self.accumulate(grads, a, grad * out),
            Op::Log(a) => self.accumulate(grads, a, grad / self.value(a)),
            Op::Tanh(a) => {
                let mut g = grad.clone();
                Zip::from(&mut g).and(out).for_each(|g, &y| *g *= 1.0 - y * y);
                self.accumulate(grads, a, g);
            }
            Op::Sigmoid(a) => {
                let mut g = grad.clone();
                Zip::from(&mut g).and(out).for_each(|g, &y| *g *= y * (1.0 - y));
                self.accumulate(grads, a, g);
            }
            Op::Relu(a) => {
                let mut g = grad.clone();
                Zip::from(&mut g).and(out).for_each(|g, &y| {
                    if y <= 0.0 {
                        *g = 0.0
                    }
                });
                self.accumulate(grads, a, g);
            }
            Op::Square(a) => {
                let mut g = grad.clone();
                Zip::from(&mut g)
                    .and(self.value(a))
                    .for_each(|g, &x| *g *= 2.0 * x);
                self.accumulate(grads, a, g);
            }
            Op::Clamp(a, lo, hi) => {
                let mut g = grad.clone();
                Zip::from(&mut g).and(self.value(a)).for_each(|g, &x| {
                    if x < lo || x > hi {
                        *g = 0.0
                    }
                });
                self.accumulate(grads, a, g);
            }
            Op::ConcatCols(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.nodes[p.0].needs_grad {
                        self.accumulate(grads, p, grad.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.nodes[p.0].needs_grad {
                        self.accumulate(grads, p, grad.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut g = Array2::zeros(self.shape(a));
                g.slice_mut(s![.., start..end]).assign(grad);
                self.accumulate(grads, a, g);
            }
            Op::SliceRows(a, start, end) => {
                let mut g = Array2::zeros(self.shape(a));
                g.slice_mut(s![start..end, ..]).assign(grad);
                self.accumulate(grads, a, g);
            }
            Op::SumCols(a) => {
                let g = broadcast_to(grad, self.shape(a)).to_owned();
                self.accumulate(grads, a, g);
            }
            Op::SumAll(a) => {
                let g = Array2::from_elem(self.shape(a), grad[[0, 0]]);
                self.accumulate(grads, a, g);
            }
            Op::Softmax(a) => {
                // dx = y ⊙ (g − Σ g ⊙ y)
                let mut g = grad * out;
                let dots = g.sum_axis(Axis(1));
                for (mut row, (yrow, d)) in g.rows_mut().into_iter().zip(out.rows().into_iter().zip(dots.iter())) {
                    Zip::from(&mut row).and(&yrow).for_each(|gi, &yi| *gi -= yi * d);
                }
                self.accumulate(grads, a, g);
            }
            Op::LogSoftmax(a) => {
                // dx = g − softmax(x) Σ g
                let sums = grad.sum_axis(Axis(1));
                let mut g = grad.clone();
                for (mut row, (orow, s)) in g.rows_mut().into_iter().zip(out.rows().into_iter().zip(sums.iter())) {
                    Zip::from(&mut row).and(&orow).for_each(|gi, &lp| *gi -= lp.exp() * s);
                }
                self.accumulate(grads, a, g);
            }
            Op::LstmGates(pre, cell) => {
                let p = self.value(pre);
                let c = self.value(cell);
                let (n, four_h) = p.dim();
                let h = four_h / 4;
                let mut d_pre = Array2::zeros((n, four_h));
                let mut d_cell = Array2::zeros((n, h));
                for r in 0..n {
                    for j in 0..h {
                        let i_g = sigmoid(p[[r, j]]);
                        let f_g = sigmoid(p[[r, h + j]]);
                        let g_g = p[[r, 2 * h + j]].tanh();
                        let o_g = sigmoid(p[[r, 3 * h + j]]);
                        let c_next = out[[r, h + j]];
                        let t = c_next.tanh();
                        let dh = grad[[r, j]];
                        let dc = grad[[r, h + j]] + dh * o_g * (1.0 - t * t);
                        d_pre[[r, j]] = dc * g_g * i_g * (1.0 - i_g);
                        d_pre[[r, h + j]] = dc * c[[r, j]] * f_g * (1.0 - f_g);
                        d_pre[[r, 2 * h + j]] = dc * i_g * (1.0 - g_g * g_g);
                        d_pre[[r, 3 * h + j]] = dh * t * o_g * (1.0 - o_g);
                        d_cell[[r, j]] = dc * f_g;
                    }
                }
                self.accumulate(grads, pre, d_pre);
                self.accumulate(grads, cell, d_cell);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of d(sum of f(x))/dx for a single-input op.
    fn check_unary(x0: Array2<f64>, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut store = ParamStore::new();
        let id = store.add("x", x0.clone());
        let mut g = Graph::with_params(&store);
        let x = g.param(id);
        let y = f(&mut g, x);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let h = 1e-6;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let eval = |delta: f64| {
                    let mut st = store.clone();
                    st.get_mut(id)[[i, j]] += delta;
                    let mut g = Graph::with_params(&st);
                    let x = g.param(id);
                    let y = f(&mut g, x);
                    g.value(y).sum()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads.get(id)[[i, j]];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn elementwise_gradients() {
        let x = array![[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]];
        check_unary(x.clone(), |g, v| g.exp(v));
        check_unary(x.clone(), |g, v| g.tanh(v));
        check_unary(x.clone(), |g, v| g.sigmoid(v));
        check_unary(x.clone(), |g, v| g.square(v));
        check_unary(x.clone(), |g, v| g.relu(v));
        check_unary(x.mapv(f64::abs), |g, v| g.log(v));
    }

    #[test]
    fn softmax_gradients_under_weighting() {
        let x = array![[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]];
        let w = array![[1.0, 2.0, -3.0], [0.5, -1.0, 0.25]];
        check_unary(x.clone(), |g, v| {
            let s = g.softmax(v);
            let c = g.constant(w.clone());
            g.mul(s, c)
        });
        check_unary(x, |g, v| {
            let s = g.log_softmax(v);
            let c = g.constant(w.clone());
            g.mul(s, c)
        });
    }

    #[test]
    fn broadcast_and_structure_gradients() {
        let x = array![[0.3, -1.2], [2.0, 0.1], [0.5, 0.5]];
        check_unary(x.clone(), |g, v| {
            let row = g.slice_rows(v, 0, 1);
            let prod = g.mul(v, row);
            let col = g.sum_cols(v);
            let both = g.add(prod, col);
            let cat = g.concat_cols(&[both, v]);
            let r = g.concat_rows(&[cat, cat]);
            g.square(r)
        });
    }

    #[test]
    fn lstm_gate_gradients() {
        let pre = array![[0.3, -1.2, 0.7, 0.1, -0.5, 0.9, 1.1, -0.2]];
        let weights = array![[0.7, -1.3, 0.4, 2.0]];
        check_unary(pre, |g, v| {
            let c = g.constant(array![[0.4, -0.8]]);
            let out = g.lstm_gates(v, c);
            let w = g.constant(weights.clone());
            g.mul(out, w)
        });
        let cell = array![[0.4, -0.8]];
        check_unary(cell, |g, v| {
            let p = g.constant(array![[0.3, -1.2, 0.7, 0.1, -0.5, 0.9, 1.1, -0.2]]);
            let out = g.lstm_gates(p, v);
            let w = g.constant(weights.clone());
            g.mul(out, w)
        });
    }

    #[test]
    fn constants_do_not_track_gradients() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0]]);
        let b = g.exp(a);
        let s = g.sum_all(b);
        let grads = g.backward(s);
        assert!(grads.grads.is_empty());
    }
}
