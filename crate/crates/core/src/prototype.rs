//! Sentiment prototype bank and prototype-guided extraction.
//!
//! `K` learnable prototypes act as queries of a cross-attention over each
//! encoded modality sequence. Because the same prototypes query all three
//! modalities, row `k` of every response answers the same prototype.

use crate::autodiff::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::data::Modality;
use crate::encoder::EncodedSequence;
use crate::error::{Error, Result};
use crate::nn::{Ctx, FeedForward, LayerNorm, MultiHeadAttention};

pub const PROTOTYPE_INIT_STD: f64 = 0.02;

/// The learnable `K x d` prototype matrix `M`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrototypeBank {
    pub matrix: ParamId,
    pub num_prototypes: usize,
    pub dim: usize,
}

impl PrototypeBank {
    pub fn new(store: &mut ParamStore, name: &str, num_prototypes: usize, dim: usize, rng: &mut Rng) -> Self {
        let matrix = store.add_normal(name, num_prototypes, dim, PROTOTYPE_INIT_STD, false, rng);
        Self {
            matrix,
            num_prototypes,
            dim,
        }
    }

    pub fn var(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        tape.param(store, self.matrix)
    }
}

/// Modality-specific cross-attention from the prototypes into `H^m`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub attn: MultiHeadAttention,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_dim: usize, rng: &mut Rng) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
        }
    }

    pub fn num_params(dim: usize, ffn_dim: usize) -> usize {
        MultiHeadAttention::num_params(dim) + FeedForward::num_params(dim, ffn_dim) + 4 * dim
    }
}

/// `Z^m`: the `K x d` slot-aligned response of one modality.
#[derive(Clone, Debug)]
pub struct PrototypeResponse {
    pub modality: Modality,
    pub response: Var,
    /// Per-head `K x L_m` attention weights; empty for mean pooling.
    pub attn_weights: Vec<Var>,
}

/// `Z~ = LN(M + CrossAttn(M, H, H))`, then `Z = LN(Z~ + FFN(Z~))`.
pub fn extract(
    tape: &mut Tape,
    store: &ParamStore,
    bank: &PrototypeBank,
    seq: &EncodedSequence,
    params: &CrossAttention,
    ctx: &mut Ctx,
) -> Result<PrototypeResponse> {
    let d = tape.shape(seq.hidden).1;
    if d != bank.dim {
        return Err(Error::Schema(format!(
            "{} sequence width {d} does not match prototype width {}",
            seq.modality, bank.dim
        )));
    }
    let m = bank.var(tape, store);
    let attn = params.attn.forward(tape, store, m, seq.hidden, &seq.mask, ctx)?;
    let z = tape.add(m, attn.out)?;
    let z_tilde = params.ln_attn.forward(tape, store, z)?;
    let f = params.ffn.forward(tape, store, z_tilde, ctx)?;
    let z = tape.add(z_tilde, f)?;
    let response = params.ln_ffn.forward(tape, store, z)?;
    Ok(PrototypeResponse {
        modality: seq.modality,
        response,
        attn_weights: attn.weights,
    })
}

/// Masked mean over time, repeated into `num_prototypes` identical rows.
pub fn mean_pool_fallback(tape: &mut Tape, seq: &EncodedSequence, num_prototypes: usize) -> Result<PrototypeResponse> {
    let kept = seq.mask.iter().filter(|&&m| m).count();
    if kept == 0 {
        return Err(Error::Contract(format!("{} sequence has no valid positions", seq.modality)));
    }
    let w: Vec<f64> = seq
        .mask
        .iter()
        .map(|&m| if m { 1.0 / kept as f64 } else { 0.0 })
        .collect();
    let w = tape.constant(Tensor::row_vector(&w));
    let mean = tape.matmul(w, seq.hidden)?;
    let ones = tape.constant(Tensor::filled(num_prototypes, 1, 1.0));
    let response = tape.matmul(ones, mean)?;
    Ok(PrototypeResponse {
        modality: seq.modality,
        response,
        attn_weights: Vec::new(),
    })
}
