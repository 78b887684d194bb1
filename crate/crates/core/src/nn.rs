//! Parameter blocks shared by the encoders, fusion and scorer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Matrix;

/// Registers freshly initialized parameters under a name prefix.
///
/// Weights are uniform in `±1/sqrt(fan_in)`; biases start at zero.
pub struct Init<'s> {
    pub store: &'s mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl<'s> Init<'s> {
    pub fn new(store: &'s mut ParamStore, rng: ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    pub fn weight(&mut self, name: &str, fan_in: usize, cols: usize) -> ParamId {
        self.weight_rows(name, fan_in, fan_in, cols)
    }

    /// Weight with `rows` rows but scaled for `fan_in` inputs.
    pub fn weight_rows(&mut self, name: &str, rows: usize, fan_in: usize, cols: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.store.add(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Matrix::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: &str, cols: usize) -> ParamId {
        self.store.add(name, Matrix::from_vec(1, cols, vec![1.0; cols]))
    }
}

/// `x W + b`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(init: &mut Init<'_>, name: &str, input: usize, output: usize) -> Self {
        Self {
            w: init.weight(&format!("{name}.w"), input, output),
            b: init.zeros(&format!("{name}.b"), 1, output),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

/// `max(0, x W + b) V + c`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub inner: Dense,
    pub outer: Dense,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            inner: Dense::new(init, &format!("{name}.inner"), input, hidden),
            outer: Dense::new(init, &format!("{name}.outer"), hidden, output),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let h = self.inner.forward(tape, x);
        let h = tape.relu(h);
        self.outer.forward(tape, h)
    }
}

/// One attention head's query, key and value projections (`width → head_dim`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Multi-head attention without projection biases:
/// `concat(head_1..head_n) W_O`, `head_j = softmax(Q_j K_jᵀ / sqrt(head_dim) + mask) V_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub heads: Vec<Head>,
    pub output: ParamId,
    pub width: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, n_head: usize) -> Self {
        assert!(n_head > 0 && width % n_head == 0, "width {width} not divisible by {n_head} heads");
        let head_dim = width / n_head;
        let heads = (0..n_head)
            .map(|j| Head {
                query: init.weight(&format!("{name}.head{j}.query"), width, head_dim),
                key: init.weight(&format!("{name}.head{j}.key"), width, head_dim),
                value: init.weight(&format!("{name}.head{j}.value"), width, head_dim),
            })
            .collect();
        Self {
            heads,
            output: init.weight(&format!("{name}.output"), width, width),
            width,
            head_dim,
        }
    }

    /// Attends from each row of `query` over the rows of `memory`. `mask`
    /// hides memory rows. Returns the output and each head's weight matrix.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        query: Var,
        memory: Var,
        mask: Option<&[bool]>,
    ) -> (Var, Vec<Var>) {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let wq = tape.param(head.query);
            let wk = tape.param(head.key);
            let wv = tape.param(head.value);
            let q = tape.matmul(query, wq);
            let k = tape.matmul(memory, wk);
            let v = tape.matmul(memory, wv);
            let kt = tape.transpose(k);
            let logits = tape.matmul(q, kt);
            let logits = tape.scale(logits, scale);
            let w = tape.softmax_rows(logits, mask);
            outs.push(tape.matmul(w, v));
            weights.push(w);
        }
        let cat = tape.concat_cols(&outs);
        let wo = tape.param(self.output);
        (tape.matmul(cat, wo), weights)
    }
}
