//! Layer building blocks. Each layer only holds [`ParamId`]s; the weights live
//! in a [`ParamStore`] and are bound onto a [`Tape`] at forward time.

use crate::mat::Mat;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), input, output, rng);
        let bias = Some(store.add_zeros(format!("{name}.bias"), 1, output));
        Self { weight, bias }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), input, output, rng);
        Self { weight, bias: None }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.gain"), 1, dim),
            bias: store.add_zeros(format!("{name}.bias"), 1, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.normalize_rows(x);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let scaled = tape.mul_row(n, g);
        tape.add_row(scaled, b)
    }
}

/// Multi-head scaled dot-product attention with separate Q/K/V/output projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Result of an attention call; `weights` holds one (queries x keys) matrix per head.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            heads,
            dim,
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
        }
    }

    /// Attends already-projected queries over already-projected keys/values.
    /// `mask`, when given, is added to the (queries x keys) score matrix.
    pub fn attend(&self, tape: &mut Tape, store: &ParamStore, q: Var, k: Var, v: Var, mask: Option<&Mat>) -> AttentionOutput {
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * head_dim, head_dim),
                    tape.slice_cols(k, h * head_dim, head_dim),
                    tape.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let scores = match mask {
                Some(m) => tape.add_const(scores, m),
                None => scores,
            };
            let probs = tape.softmax_rows(scores);
            outs.push(tape.matmul(probs, vh));
            weights.push(probs);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let output = self.output.forward(tape, store, merged);
        AttentionOutput { output, weights }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_q: Var, x_kv: Var, mask: Option<&Mat>) -> AttentionOutput {
        let q = self.query.forward(tape, store, x_q);
        let k = self.key.forward(tape, store, x_kv);
        let v = self.value.forward(tape, store, x_kv);
        self.attend(tape, store, q, k, v, mask)
    }
}

/// Additive mask letting query `i` see keys `0..=offset + i`.
pub fn causal_mask(queries: usize, keys: usize, offset: usize) -> Mat {
    let mut m = Mat::zeros(queries, keys);
    for i in 0..queries {
        for j in 0..keys {
            if j > offset + i {
                m.set(i, j, -1e9);
            }
        }
    }
    m
}

/// Gated recurrent unit cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub hidden: usize,
    input_gates: Linear,
    hidden_gates: Linear,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden,
            input_gates: Linear::new(store, &format!("{name}.input"), input, 3 * hidden, rng),
            hidden_gates: Linear::new(store, &format!("{name}.hidden"), hidden, 3 * hidden, rng),
        }
    }

    /// One step: `x` is 1 x input, `h` is 1 x hidden.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Var {
        let n = self.hidden;
        let gi = self.input_gates.forward(tape, store, x);
        let gh = self.hidden_gates.forward(tape, store, h);
        let (ir, iz, inn) = (tape.slice_cols(gi, 0, n), tape.slice_cols(gi, n, n), tape.slice_cols(gi, 2 * n, n));
        let (hr, hz, hn) = (tape.slice_cols(gh, 0, n), tape.slice_cols(gh, n, n), tape.slice_cols(gh, 2 * n, n));
        let r = tape.add(ir, hr);
        let r = tape.sigmoid(r);
        let z = tape.add(iz, hz);
        let z = tape.sigmoid(z);
        let gated = tape.mul(r, hn);
        let cand = tape.add(inn, gated);
        let cand = tape.tanh(cand);
        // h' = (1 - z) * cand + z * h = cand + z * (h - cand)
        let diff = tape.sub(h, cand);
        let keep = tape.mul(z, diff);
        tape.add(cand, keep)
    }

    /// Runs over the rows of `xs`, returning the stacked hidden states.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, xs: Var, reverse: bool) -> Var {
        let n = tape.value(xs).rows();
        let mut h = tape.constant(Mat::zeros(1, self.hidden));
        let mut states = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for i in order {
            let x = tape.slice_rows(xs, i, 1);
            h = self.step(tape, store, x, h);
            states[i] = h;
        }
        tape.concat_rows(&states)
    }
}
