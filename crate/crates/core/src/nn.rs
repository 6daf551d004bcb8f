//! Parameterised building blocks shared by the model stages.

use crate::autodiff::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// Per-forward-pass state: train/eval mode, dropout rate and the dropout
/// generator.
pub struct Ctx<'a> {
    pub training: bool,
    pub dropout: f64,
    pub rng: &'a mut Rng,
}

impl<'a> Ctx<'a> {
    pub fn train(dropout: f64, rng: &'a mut Rng) -> Self {
        Self {
            training: true,
            dropout,
            rng,
        }
    }

    pub fn eval(rng: &'a mut Rng) -> Self {
        Self {
            training: false,
            dropout: 0.0,
            rng,
        }
    }

    pub fn drop(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.dropout(x, self.dropout, self.rng, self.training)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let w = store.add_xavier(format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, fan_out), false);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    pub fn num_params(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_filled(format!("{name}.gain"), 1, dim, 1.0),
            bias: store.add_filled(format!("{name}.bias"), 1, dim, 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Position-wise `d -> hidden -> d` network with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = ctx.drop(tape, h)?;
        self.down.forward(tape, store, h)
    }

    pub fn num_params(dim: usize, hidden: usize) -> usize {
        Linear::num_params(dim, hidden) + Linear::num_params(hidden, dim)
    }
}

/// Scaled dot-product attention with per-head projections and an output
/// projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// One `L_q x L_k` weight matrix per head (after masking, before dropout).
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    pub fn num_params(dim: usize) -> usize {
        4 * Linear::num_params(dim, dim)
    }

    /// `query` is `L_q x d`, `kv` is `L_k x d`; keys with `key_mask[j] ==
    /// false` receive zero weight.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        kv: Var,
        key_mask: &[bool],
        ctx: &mut Ctx,
    ) -> Result<AttentionOutput> {
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, kv)?;
        let v = self.v.forward(tape, store, kv)?;
        let dim = tape.shape(q).1;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let w = tape.masked_softmax_rows(scores, key_mask)?;
            weights.push(w);
            let wd = ctx.drop(tape, w)?;
            outs.push(tape.matmul(wd, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        let out = self.o.forward(tape, store, cat)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Pre-norm Transformer layer: `x + Attn(LN(x))` then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct PreNormBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl PreNormBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_dim: usize, rng: &mut Rng) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng),
        }
    }

    pub fn num_params(dim: usize, ffn_dim: usize) -> usize {
        4 * dim + MultiHeadAttention::num_params(dim) + FeedForward::num_params(dim, ffn_dim)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: &[bool], ctx: &mut Ctx) -> Result<Var> {
        Ok(self.forward_with_weights(tape, store, x, mask, ctx)?.out)
    }

    /// Like [`forward`](Self::forward) but also returns the per-head
    /// attention weights.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: &[bool],
        ctx: &mut Ctx,
    ) -> Result<AttentionOutput> {
        let h = self.ln_attn.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h, mask, ctx)?;
        let x = tape.add(x, a.out)?;
        let h = self.ln_ffn.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h, ctx)?;
        Ok(AttentionOutput {
            out: tape.add(x, f)?,
            weights: a.weights,
        })
    }
}
