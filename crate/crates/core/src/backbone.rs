//! Gated Transformer backbone and regression head.
//!
//! Token layout is fixed: `[cls; Z_fused; Z^t; Z^a; Z^v]`, length `1 + 4K`
//! (or `1 + K` without the fine path). After each layer a sigmoid gate read
//! from the cls token rescales the three modality-specific token groups;
//! cls and fused tokens are never gated.

use crate::autodiff::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, PreNormBlock};

/// How the per-layer modality gates are produced.
#[derive(Clone, Debug, PartialEq)]
pub enum Gating {
    /// `g = sigmoid(W_l h_cls + b_l)`.
    Learned,
    /// Externally fixed gate triples, one per layer, in (t, a, v) order.
    Fixed(Vec<[f64; 3]>),
    /// No gating step at all.
    Disabled,
}

/// `d -> d/2 -> 1` MLP with ReLU.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl RegressionHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) -> Self {
        let mid = (dim / 2).max(1);
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), dim, mid, rng),
            out: Linear::new(store, &format!("{name}.out"), mid, 1, rng),
        }
    }

    pub fn num_params(dim: usize) -> usize {
        let mid = (dim / 2).max(1);
        Linear::num_params(dim, mid) + Linear::num_params(mid, 1)
    }

    /// Scalar prediction from a `1 x d` cls state.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, cls: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, cls)?;
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct BackboneLayer {
    pub block: PreNormBlock,
    /// `W_l: d -> 3`, `b_l`; absent when gating is ablated.
    pub gate: Option<Linear>,
}

/// Per-layer record of one backbone pass.
#[derive(Clone, Debug)]
pub struct BackboneTrace {
    /// `1 x 3` gate vectors, one per layer (empty when ungated).
    pub gates: Vec<Var>,
    /// Sequence after attention + FFN, before gating.
    pub pre_gate: Vec<Var>,
    /// Sequence leaving each layer.
    pub layer_out: Vec<Var>,
    /// Final cls hidden state after the closing layer norm.
    pub cls: Var,
    pub prediction: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub num_prototypes: usize,
    pub fine_path: bool,
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<BackboneLayer>,
    pub final_ln: LayerNorm,
    pub head: RegressionHead,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &Config, fine_path: bool, gated: bool, rng: &mut Rng) -> Self {
        let d = cfg.hidden_dim;
        let k = cfg.num_prototypes;
        let seq_len = Self::sequence_len(k, fine_path);
        let cls = store.add_normal("backbone.cls", 1, d, 0.02, false, rng);
        let pos = store.add_normal("backbone.pos", seq_len, d, 0.02, false, rng);
        let layers = (0..cfg.layers)
            .map(|l| {
                let name = format!("backbone.layer{l}");
                BackboneLayer {
                    block: PreNormBlock::new(store, &name, d, cfg.heads, cfg.ffn_dim(), rng),
                    gate: gated.then(|| Linear::new(store, &format!("{name}.gate"), d, 3, rng)),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, "backbone.final_ln", d);
        let head = RegressionHead::new(store, "backbone.head", d, rng);
        Self {
            num_prototypes: k,
            fine_path,
            cls,
            pos,
            layers,
            final_ln,
            head,
        }
    }

    pub fn num_params(cfg: &Config, fine_path: bool, gated: bool) -> usize {
        let d = cfg.hidden_dim;
        let per_layer =
            PreNormBlock::num_params(d, cfg.ffn_dim()) + if gated { Linear::num_params(d, 3) } else { 0 };
        d + Self::sequence_len(cfg.num_prototypes, fine_path) * d
            + cfg.layers * per_layer
            + 2 * d
            + RegressionHead::num_params(d)
    }

    pub fn sequence_len(k: usize, fine_path: bool) -> usize {
        if fine_path {
            1 + 4 * k
        } else {
            1 + k
        }
    }

    pub fn is_gated(&self) -> bool {
        self.layers.iter().all(|l| l.gate.is_some())
    }

    /// `[cls; fused; Z^t; Z^a; Z^v] + pos`. Pass `fine = None` for the
    /// fused-only layout.
    pub fn assemble_tokens(&self, tape: &mut Tape, store: &ParamStore, fused: Var, fine: Option<&[Var; 3]>) -> Result<Var> {
        let k = self.num_prototypes;
        let cls = tape.param(store, self.cls);
        let d = tape.shape(cls).1;
        let mut parts = vec![cls, fused];
        if let Some(f) = fine {
            parts.extend_from_slice(f);
        }
        if parts.len() != if self.fine_path { 5 } else { 2 } {
            return Err(Error::Schema(format!(
                "backbone expects {} token groups",
                if self.fine_path { 5 } else { 2 }
            )));
        }
        for &p in &parts[1..] {
            if tape.shape(p) != (k, d) {
                return Err(Error::Dimension {
                    op: "assemble_tokens",
                    left: (k, d),
                    right: tape.shape(p),
                });
            }
        }
        let seq = tape.concat(&parts, 0)?;
        let pos = tape.param(store, self.pos);
        tape.add(seq, pos)
    }

    /// Attention + FFN of layer `l`, without gating.
    pub fn layer_transform(&self, tape: &mut Tape, store: &ParamStore, l: usize, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let n = tape.shape(x).0;
        self.layers[l].block.forward(tape, store, x, &vec![true; n], ctx)
    }

    /// Gate vector of layer `l` computed from the cls row of `x`.
    pub fn layer_gate(&self, tape: &mut Tape, store: &ParamStore, l: usize, x: Var) -> Result<Var> {
        let lin = self.layers[l]
            .gate
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("layer {l} has no gate parameters")))?;
        let cls = tape.slice_rows(x, 0, 1)?;
        let logits = lin.forward(tape, store, cls)?;
        Ok(tape.sigmoid(logits))
    }

    /// Multiplies each modality token group by its gate entry.
    pub fn apply_gate(&self, tape: &mut Tape, x: Var, gate: Var) -> Result<Var> {
        let k = self.num_prototypes;
        let mut parts = vec![tape.slice_rows(x, 0, 1 + k)?];
        for m in 0..3 {
            let group = tape.slice_rows(x, 1 + k + m * k, k)?;
            let g = tape.slice_cols(gate, m, 1)?;
            parts.push(tape.mul(group, g)?);
        }
        tape.concat(&parts, 0)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, gating: &Gating, ctx: &mut Ctx) -> Result<BackboneTrace> {
        let expected = Self::sequence_len(self.num_prototypes, self.fine_path);
        if tape.shape(tokens).0 != expected {
            return Err(Error::Schema(format!(
                "backbone expects {expected} tokens, got {}",
                tape.shape(tokens).0
            )));
        }
        if let Gating::Fixed(g) = gating {
            if g.len() != self.layers.len() {
                return Err(Error::Config(format!(
                    "{} fixed gate triples for {} layers",
                    g.len(),
                    self.layers.len()
                )));
            }
        }
        let gating_active = self.fine_path && *gating != Gating::Disabled;
        let mut x = tokens;
        let mut trace_gates = Vec::new();
        let mut pre_gate = Vec::new();
        let mut layer_out = Vec::new();
        for l in 0..self.layers.len() {
            x = self.layer_transform(tape, store, l, x, ctx)?;
            pre_gate.push(x);
            if gating_active {
                let gate = match gating {
                    Gating::Learned => self.layer_gate(tape, store, l, x)?,
                    Gating::Fixed(g) => tape.constant(Tensor::row_vector(&g[l])),
                    Gating::Disabled => unreachable!(),
                };
                trace_gates.push(gate);
                x = self.apply_gate(tape, x, gate)?;
            }
            layer_out.push(x);
        }
        let cls = tape.slice_rows(x, 0, 1)?;
        let cls = self.final_ln.forward(tape, store, cls)?;
        let prediction = self.head.predict(tape, store, cls)?;
        Ok(BackboneTrace {
            gates: trace_gates,
            pre_gate,
            layer_out,
            cls,
            prediction,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::autodiff::seeded_rng;

    fn cfg(k: usize, layers: usize) -> Config {
        Config {
            num_prototypes: k,
            hidden_dim: 8,
            heads: 2,
            layers,
            ..Config::default()
        }
    }

    fn rand_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn groups(tape: &mut Tape, k: usize, rng: &mut Rng) -> (Var, [Var; 3]) {
        let fused = tape.constant(rand_tensor(k, 8, rng));
        let fine = [0, 1, 2].map(|_| tape.constant(rand_tensor(k, 8, rng)));
        (fused, fine)
    }

    #[test]
    fn sequence_lengths() {
        assert_eq!(Backbone::sequence_len(8, true), 33);
        assert_eq!(Backbone::sequence_len(1, true), 5);
        assert_eq!(Backbone::sequence_len(8, false), 9);
    }

    #[test]
    fn first_token_is_cls_plus_pos() {
        let mut rng = seeded_rng(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &cfg(2, 1), true, true, &mut rng);
        let mut tape = Tape::new();
        let (fused, fine) = groups(&mut tape, 2, &mut rng);
        let tokens = bb.assemble_tokens(&mut tape, &store, fused, Some(&fine)).unwrap();
        let v = tape.value(tokens);
        assert_eq!(v.shape(), (9, 8));
        let cls = store.value(bb.cls);
        let pos = store.value(bb.pos);
        for c in 0..8 {
            assert_eq!(v.get(0, c), cls.get(0, c) + pos.get(0, c));
        }
    }

    #[test]
    fn wrong_group_shape_rejected() {
        let mut rng = seeded_rng(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &cfg(2, 1), true, true, &mut rng);
        let mut tape = Tape::new();
        let (fused, mut fine) = groups(&mut tape, 2, &mut rng);
        fine[1] = tape.constant(Tensor::zeros(3, 8));
        assert!(bb.assemble_tokens(&mut tape, &store, fused, Some(&fine)).is_err());
    }

    #[test]
    fn zero_gate_params_give_half() {
        let mut rng = seeded_rng(1);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &cfg(2, 3), true, true, &mut rng);
        for l in &bb.layers {
            let g = l.gate.as_ref().unwrap();
            store.value_mut(g.w).data_mut().fill(0.0);
            store.value_mut(g.b).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let (fused, fine) = groups(&mut tape, 2, &mut rng);
        let tokens = bb.assemble_tokens(&mut tape, &store, fused, Some(&fine)).unwrap();
        let mut ctx = Ctx::eval(&mut rng);
        let tr = bb.forward(&mut tape, &store, tokens, &Gating::Learned, &mut ctx).unwrap();
        assert_eq!(tr.gates.len(), 3);
        for g in tr.gates {
            assert_eq!(tape.value(g).data(), &[0.5, 0.5, 0.5]);
        }
    }

    #[test]
    fn unit_gates_equal_ungated() {
        let mut rng = seeded_rng(2);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &cfg(3, 2), true, true, &mut rng);
        let mut tape = Tape::new();
        let (fused, fine) = groups(&mut tape, 3, &mut rng);
        let tokens = bb.assemble_tokens(&mut tape, &store, fused, Some(&fine)).unwrap();
        let mut ctx = Ctx::eval(&mut rng);
        let ones = Gating::Fixed(vec![[1.0; 3]; 2]);
        let a = bb.forward(&mut tape, &store, tokens, &ones, &mut ctx).unwrap();
        let b = bb.forward(&mut tape, &store, tokens, &Gating::Disabled, &mut ctx).unwrap();
        assert!((tape.value(a.prediction).item() - tape.value(b.prediction).item()).abs() < 1e-6);
        assert!(b.gates.is_empty());
    }

    #[test]
    fn zero_head_weights_predict_bias() {
        let mut rng = seeded_rng(3);
        let mut store = ParamStore::new();
        let head = RegressionHead::new(&mut store, "head", 8, &mut rng);
        store.value_mut(head.out.w).data_mut().fill(0.0);
        store.value_mut(head.out.b).data_mut()[0] = 0.75;
        for _ in 0..5 {
            let mut tape = Tape::new();
            let cls = tape.constant(rand_tensor(1, 8, &mut rng));
            let y = head.predict(&mut tape, &store, cls).unwrap();
            assert_eq!(tape.value(y).item(), 0.75);
        }
    }

    #[test]
    fn wrong_token_count_rejected() {
        let mut rng = seeded_rng(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &cfg(2, 1), false, false, &mut rng);
        let mut tape = Tape::new();
        let tokens = tape.constant(Tensor::zeros(9, 8));
        let mut ctx = Ctx::eval(&mut rng);
        assert!(bb.forward(&mut tape, &store, tokens, &Gating::Disabled, &mut ctx).is_err());
    }
}
