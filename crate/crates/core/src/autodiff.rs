//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live in
//! a [`ParamStore`] and are borrowed, not copied, when bound to a tape.
//! [`Tape::backward`] seeds the gradient of one output node and returns the
//! gradient of every node plus the accumulated gradient of every parameter.
//!
//! The operation set is exactly what the encoders, fusion and scorer use. The
//! recurrent cell is a single fused node with hand-written backpropagation
//! through time.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct LstmCache {
    /// Per step: input, forget, candidate, output gate activations, each `1 × h`.
    gates: Vec<[Vec<f64>; 4]>,
    /// Cell states c_0..c_T (c_0 = 0).
    cells: Vec<Vec<f64>>,
    /// Hidden states h_0..h_T (h_0 = 0).
    hidden: Vec<Vec<f64>>,
    /// Time index visited at each step.
    order: Vec<usize>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    SoftmaxRows(Var, Option<Vec<bool>>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Lstm {
        gates_in: Var,
        w_hh: Var,
        bias: Var,
        cache: Box<LstmCache>,
    },
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Matrix>,
}

/// Additive constant used for masked attention slots before they are zeroed.
pub const MASK_NEG: f64 = -1.0e30;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    bound: Vec<Option<Var>>,
}

/// Output of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to a node, or `None` if it did not influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params[id.0].as_ref()
    }

    /// Parameter gradients in store order, zeros for parameters that were not used.
    pub fn into_param_grads(self, store: &ParamStore) -> Vec<Matrix> {
        self.params
            .into_iter()
            .zip(store.values())
            .map(|(g, v)| g.unwrap_or_else(|| Matrix::zeros(v.rows(), v.cols())))
            .collect()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Cow<'a, Matrix>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Constant input. Its gradient is still reported by [`Gradients::wrt`].
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, Cow::Owned(m))
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.push(Op::Param(id), Cow::Borrowed(self.store.get(id)));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), Cow::Owned(out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), Cow::Owned(out))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(Op::AddRow(a, row), Cow::Owned(out))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), Cow::Owned(out))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(Op::Scale(a, s), Cow::Owned(out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
                off += m.cols();
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Cow::Owned(out))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Cow::Owned(Matrix::from_vec(rows, cols, data)),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start), Cow::Owned(out))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows(), "slice_rows out of range");
        let out = Matrix::from_vec(
            len,
            m.cols(),
            m.data()[start * m.cols()..(start + len) * m.cols()].to_vec(),
        );
        self.push(Op::SliceRows(a, start), Cow::Owned(out))
    }

    /// Row lookup; equivalent to multiplying a one-hot matrix by `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * m.cols());
        for &i in idx {
            data.extend_from_slice(m.row(i));
        }
        let out = Matrix::from_vec(idx.len(), m.cols(), data);
        self.push(Op::GatherRows(a, idx.to_vec()), Cow::Owned(out))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), Cow::Owned(out))
    }

    /// Row-wise softmax. With a column mask, masked columns get the additive
    /// [`MASK_NEG`] logit and are then forced to exactly zero, and the row is
    /// renormalized over the unmasked columns.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let m = self.value(a);
        if let Some(mask) = mask {
            assert_eq!(mask.len(), m.cols(), "softmax mask width mismatch");
            assert!(mask.iter().any(|&b| b), "softmax mask has no visible column");
        }
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let logits: Vec<f64> = m
                .row(r)
                .iter()
                .enumerate()
                .map(|(c, &x)| match mask {
                    Some(mask) if !mask[c] => x + MASK_NEG,
                    _ => x,
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let row = out.row_mut(r);
            for (o, &l) in row.iter_mut().zip(&logits) {
                *o = (l - max).exp();
            }
            if let Some(mask) = mask {
                for (o, &visible) in row.iter_mut().zip(mask) {
                    if !visible {
                        *o = 0.0;
                    }
                }
            }
            let z: f64 = row.iter().sum();
            for o in row.iter_mut() {
                *o /= z;
            }
        }
        self.push(
            Op::SoftmaxRows(a, mask.map(<[bool]>::to_vec)),
            Cow::Owned(out),
        )
    }

    /// Per-row layer normalization with learned gain and offset rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let m = self.value(x);
        let n = m.cols() as f64;
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut normalized = Matrix::zeros(m.rows(), m.cols());
        let mut out = Matrix::zeros(m.rows(), m.cols());
        let mut inv_std = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let row = m.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..m.cols() {
                let xh = (row[c] - mean) * is;
                normalized.set(r, c, xh);
                out.set(r, c, xh * g.get(0, c) + b.get(0, c));
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            Cow::Owned(out),
        )
    }

    /// Runs a single-layer LSTM over a sequence and returns the final hidden
    /// state (`1 × h`).
    ///
    /// `gates_in` is `T × 4h` and already holds the input contribution to the
    /// gate pre-activations, gate order input, forget, candidate, output.
    /// `w_hh` is `h × 4h`, `bias` is `1 × 4h`. With `reverse` the sequence is
    /// consumed from the last step to the first.
    pub fn lstm(&mut self, gates_in: Var, w_hh: Var, bias: Var, reverse: bool) -> Var {
        let x = self.value(gates_in);
        let w = self.value(w_hh);
        let b = self.value(bias);
        let h = w.rows();
        assert_eq!(w.cols(), 4 * h, "recurrent weight must be h × 4h");
        assert_eq!(x.cols(), 4 * h, "gate input must be T × 4h");
        assert_eq!(b.shape(), (1, 4 * h), "bias must be 1 × 4h");
        let steps = x.rows();
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        let mut cells = vec![vec![0.0; h]];
        let mut hidden = vec![vec![0.0; h]];
        let mut gates = Vec::with_capacity(steps);
        let mut pre = vec![0.0; 4 * h];
        for &t in &order {
            let h_prev = hidden.last().unwrap();
            let c_prev = cells.last().unwrap();
            for ((p, xi), bi) in pre.iter_mut().zip(x.row(t)).zip(b.data()) {
                *p = xi + bi;
            }
            for (k, &hp) in h_prev.iter().enumerate() {
                if hp == 0.0 {
                    continue;
                }
                for (p, wv) in pre.iter_mut().zip(w.row(k)) {
                    *p += hp * wv;
                }
            }
            let ig: Vec<f64> = pre[0..h].iter().map(|&v| sigmoid(v)).collect();
            let fg: Vec<f64> = pre[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
            let gg: Vec<f64> = pre[2 * h..3 * h].iter().map(|&v| v.tanh()).collect();
            let og: Vec<f64> = pre[3 * h..4 * h].iter().map(|&v| sigmoid(v)).collect();
            let c: Vec<f64> = (0..h).map(|j| fg[j] * c_prev[j] + ig[j] * gg[j]).collect();
            let hn: Vec<f64> = (0..h).map(|j| og[j] * c[j].tanh()).collect();
            gates.push([ig, fg, gg, og]);
            cells.push(c);
            hidden.push(hn);
        }
        let out = Matrix::row_vector(hidden.last().unwrap().clone());
        let cache = Box::new(LstmCache {
            gates,
            cells,
            hidden,
            order,
        });
        self.push(
            Op::Lstm {
                gates_in,
                w_hh,
                bias,
                cache,
            },
            Cow::Owned(out),
        )
    }

    /// Backpropagates `seed` (same shape as `output`) through the tape.
    pub fn backward(&self, output: Var, seed: Matrix) -> Gradients {
        assert_eq!(
            seed.shape(),
            self.value(output).shape(),
            "seed gradient shape mismatch"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Matrix>> = (0..self.store.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => accumulate(&mut params[id.0], g.clone()),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads[row.0], g.sum_rows());
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], g.scale(*s)),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.value(*p).shape();
                        let gp = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        off += r;
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                    accumulate(&mut grads[a.0], ga);
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()),
                Op::SoftmaxRows(a, mask) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            let visible = mask.as_ref().is_none_or(|m| m[c]);
                            if visible {
                                ga.set(r, c, yr[c] * (gr[c] - inner));
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let gm = self.value(*gamma);
                    let n = normalized.cols();
                    let mut gx = Matrix::zeros(normalized.rows(), n);
                    let mut ggamma = Matrix::zeros(1, n);
                    let mut gbeta = Matrix::zeros(1, n);
                    for r in 0..normalized.rows() {
                        let xh = normalized.row(r);
                        let gr = g.row(r);
                        let dxh: Vec<f64> = (0..n).map(|c| gr[c] * gm.get(0, c)).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            gx.set(r, c, inv_std[r] * (dxh[c] - mean_d - xh[c] * mean_dx));
                            ggamma.data_mut()[c] += gr[c] * xh[c];
                            gbeta.data_mut()[c] += gr[c];
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[gamma.0], ggamma);
                    accumulate(&mut grads[beta.0], gbeta);
                }
                Op::Lstm {
                    gates_in,
                    w_hh,
                    bias,
                    cache,
                } => {
                    let w = self.value(*w_hh);
                    let h = w.rows();
                    let steps = cache.order.len();
                    let mut gx = Matrix::zeros(self.value(*gates_in).rows(), 4 * h);
                    let mut gw = Matrix::zeros(h, 4 * h);
                    let mut gb = Matrix::zeros(1, 4 * h);
                    let mut dh: Vec<f64> = g.data().to_vec();
                    let mut dc = vec![0.0; h];
                    let mut dpre = vec![0.0; 4 * h];
                    for s in (0..steps).rev() {
                        let [ig, fg, gg, og] = &cache.gates[s];
                        let c = &cache.cells[s + 1];
                        let c_prev = &cache.cells[s];
                        let h_prev = &cache.hidden[s];
                        for j in 0..h {
                            let tc = c[j].tanh();
                            let d_o = dh[j] * tc;
                            dc[j] += dh[j] * og[j] * (1.0 - tc * tc);
                            let d_i = dc[j] * gg[j];
                            let d_g = dc[j] * ig[j];
                            let d_f = dc[j] * c_prev[j];
                            dpre[j] = d_i * ig[j] * (1.0 - ig[j]);
                            dpre[h + j] = d_f * fg[j] * (1.0 - fg[j]);
                            dpre[2 * h + j] = d_g * (1.0 - gg[j] * gg[j]);
                            dpre[3 * h + j] = d_o * og[j] * (1.0 - og[j]);
                            dc[j] *= fg[j];
                        }
                        let t = cache.order[s];
                        gx.row_mut(t).copy_from_slice(&dpre);
                        for (o, d) in gb.data_mut().iter_mut().zip(&dpre) {
                            *o += d;
                        }
                        for (k, &hp) in h_prev.iter().enumerate() {
                            if hp == 0.0 {
                                continue;
                            }
                            for (o, d) in gw.row_mut(k).iter_mut().zip(&dpre) {
                                *o += hp * d;
                            }
                        }
                        for (k, dhk) in dh.iter_mut().enumerate() {
                            *dhk = crate::tensor::dot(w.row(k), &dpre);
                        }
                    }
                    accumulate(&mut grads[gates_in.0], gx);
                    accumulate(&mut grads[w_hh.0], gw);
                    accumulate(&mut grads[bias.0], gb);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}
