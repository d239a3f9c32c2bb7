//! Parameterised building blocks shared by the backbone, encoder and head.

use crate::error::Result;
use crate::tensor::{ParamStore, StreamKey, Tape, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// How a forward pass should behave.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardMode {
    pub training: bool,
    /// Maximum stochastic-depth rate; layer `i` of `n` uses `p·(i+1)/n`.
    pub drop_path: f64,
    pub dropout: f64,
    /// Shuffle real views before fusion (training only).
    pub shuffle: bool,
    /// Root of every random stream used by this pass.
    pub key: StreamKey,
}

impl ForwardMode {
    pub fn eval() -> Self {
        Self {
            training: false,
            drop_path: 0.0,
            dropout: 0.0,
            shuffle: false,
            key: StreamKey::new(0, "eval", 0),
        }
    }

    pub fn train(key: StreamKey) -> Self {
        Self {
            training: true,
            drop_path: 0.0,
            dropout: 0.0,
            shuffle: true,
            key,
        }
    }

    pub fn with_shuffle(mut self, shuffle: bool) -> Self {
        self.shuffle = shuffle;
        self
    }

    pub fn with_drop_path(mut self, p: f64) -> Self {
        self.drop_path = p;
        self
    }

    pub(crate) fn layer_drop(&self, index: usize, count: usize) -> f64 {
        if !self.training || count == 0 {
            0.0
        } else {
            self.drop_path * (index + 1) as f64 / count as f64
        }
    }
}

pub(crate) fn linear(tape: &Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.affine(x, w, Some(b))
}

pub(crate) fn layer_norm(tape: &Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.g"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let n = tape.layer_norm(x, LN_EPS)?;
    tape.add(tape.mul(n, g)?, b)
}

pub(crate) fn maybe_drop_path(tape: &Tape, x: Var, p: f64, key: StreamKey) -> Result<Var> {
    if p > 0.0 {
        tape.drop_path(x, p, key)
    } else {
        Ok(x)
    }
}

/// `fc2(gelu(fc1(x)))`
pub(crate) fn feed_forward(
    tape: &Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    mode: &ForwardMode,
) -> Result<Var> {
    let mut h = tape.gelu(linear(tape, store, &format!("{prefix}.fc1"), x)?)?;
    if mode.training && mode.dropout > 0.0 {
        h = tape.dropout(h, mode.dropout, mode.key.child(prefix))?;
    }
    linear(tape, store, &format!("{prefix}.fc2"), h)
}

/// Multi-head attention of `q_in: [Tq, D]` over `kv_in: [Tk, D]`.
pub(crate) fn attention(
    tape: &Tape,
    store: &ParamStore,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
) -> Result<Var> {
    let tq = tape.shape(q_in)[0];
    let tk = tape.shape(kv_in)[0];
    let d = tape.shape(q_in)[1];
    let dh = d / heads;
    let q = linear(tape, store, &format!("{prefix}.q"), q_in)?;
    let q = tape.scale(q, 1.0 / (dh as f64).sqrt())?;
    let k = linear(tape, store, &format!("{prefix}.k"), kv_in)?;
    let v = linear(tape, store, &format!("{prefix}.v"), kv_in)?;
    let q = tape.permute(tape.reshape(q, &[tq, heads, dh])?, &[1, 0, 2])?;
    let k = tape.permute(tape.reshape(k, &[tk, heads, dh])?, &[1, 2, 0])?;
    let v = tape.permute(tape.reshape(v, &[tk, heads, dh])?, &[1, 0, 2])?;
    let weights = tape.softmax(tape.matmul(q, k)?)?;
    let o = tape.matmul(weights, v)?;
    let o = tape.reshape(tape.permute(o, &[1, 0, 2])?, &[tq, d])?;
    linear(tape, store, &format!("{prefix}.o"), o)
}
