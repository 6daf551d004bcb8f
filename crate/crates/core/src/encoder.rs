//! Per-modality encoders into the shared hidden space.
//!
//! Each modality gets a linear projection `d_m -> d`, optional learnable
//! positional embeddings and one pre-norm Transformer layer. The three
//! encoders share no parameters.

use crate::autodiff::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::config::Config;
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, PreNormBlock};

/// `H^m`: an `L_m x d` sequence whose masked rows are exactly zero.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub modality: Modality,
    pub hidden: Var,
    pub mask: Vec<bool>,
    /// Self-attention weights per head, `L_m x L_m`.
    pub attn_weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    pub modality: Modality,
    pub input_width: usize,
    pub max_len: usize,
    pub proj: Linear,
    pub pos: Option<ParamId>,
    pub block: PreNormBlock,
}

impl ModalityEncoder {
    pub fn new(store: &mut ParamStore, cfg: &Config, modality: Modality, input_width: usize, rng: &mut Rng) -> Self {
        let name = format!("encoder.{}", modality.name());
        let d = cfg.hidden_dim;
        let proj = Linear::new(store, &format!("{name}.proj"), input_width, d, rng);
        let pos = cfg
            .encoder_pos_emb
            .then(|| store.add_normal(format!("{name}.pos"), cfg.max_seq_len, d, 0.02, false, rng));
        let block = PreNormBlock::new(store, &format!("{name}.block"), d, cfg.heads, cfg.ffn_dim(), rng);
        Self {
            modality,
            input_width,
            max_len: cfg.max_seq_len,
            proj,
            pos,
            block,
        }
    }

    pub fn num_params(cfg: &Config, input_width: usize) -> usize {
        let d = cfg.hidden_dim;
        Linear::num_params(input_width, d)
            + if cfg.encoder_pos_emb { cfg.max_seq_len * d } else { 0 }
            + PreNormBlock::num_params(d, cfg.ffn_dim())
    }

    /// Encodes one (possibly padded) `L x d_m` feature matrix.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        feats: &Tensor,
        mask: &[bool],
        ctx: &mut Ctx,
    ) -> Result<EncodedSequence> {
        let (len, width) = feats.shape();
        if width != self.input_width {
            return Err(Error::Schema(format!(
                "{} features have width {width}, encoder expects {}",
                self.modality, self.input_width
            )));
        }
        if mask.len() != len {
            return Err(Error::Schema(format!("mask length {} != sequence length {len}", mask.len())));
        }
        if len > self.max_len {
            return Err(Error::Schema(format!(
                "{} sequence length {len} exceeds max_seq_len {}",
                self.modality, self.max_len
            )));
        }
        let x = tape.constant(feats.clone());
        let mut h = self.proj.forward(tape, store, x)?;
        if let Some(pos) = self.pos {
            let table = tape.param(store, pos);
            let p = tape.slice_rows(table, 0, len)?;
            h = tape.add(h, p)?;
        }
        let block = self.block.forward_with_weights(tape, store, h, mask, ctx)?;
        let keep: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let hidden = tape.mul_const(block.out, Tensor::column_vector(&keep))?;
        Ok(EncodedSequence {
            modality: self.modality,
            hidden,
            mask: mask.to_vec(),
            attn_weights: block.weights,
        })
    }
}

/// The three independent modality encoders, indexed by [`Modality::index`].
#[derive(Clone, Debug)]
pub struct Encoders {
    pub by_modality: [ModalityEncoder; 3],
}

impl Encoders {
    pub fn new(store: &mut ParamStore, cfg: &Config, widths: [usize; 3], rng: &mut Rng) -> Self {
        Self {
            by_modality: Modality::ALL.map(|m| ModalityEncoder::new(store, cfg, m, widths[m.index()], rng)),
        }
    }

    pub fn get(&self, m: Modality) -> &ModalityEncoder {
        &self.by_modality[m.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::seeded_rng;

    fn small_cfg() -> Config {
        Config {
            hidden_dim: 8,
            heads: 2,
            max_seq_len: 16,
            ..Config::default()
        }
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::Rng as _;
        let mut r = seeded_rng(seed);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_shape_contract() {
        let cfg = Config {
            hidden_dim: 128,
            heads: 8,
            ..Config::default()
        };
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let enc = ModalityEncoder::new(&mut store, &cfg, Modality::Audio, 4, &mut rng);
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut rng);
        let out = enc
            .encode(&mut tape, &store, &rand_tensor(6, 4, 1), &[true; 6], &mut ctx)
            .unwrap();
        assert_eq!(tape.shape(out.hidden), (6, 128));
    }

    #[test]
    fn width_mismatch_is_schema_error() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let enc = ModalityEncoder::new(&mut store, &cfg, Modality::Text, 4, &mut rng);
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut rng);
        let err = enc
            .encode(&mut tape, &store, &rand_tensor(3, 5, 1), &[true; 3], &mut ctx)
            .unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn singleton_sequence_attends_to_itself() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(5);
        let enc = ModalityEncoder::new(&mut store, &cfg, Modality::Visual, 3, &mut rng);
        let x = rand_tensor(1, 3, 2);
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut rng);
        let out = enc.encode(&mut tape, &store, &x, &[true], &mut ctx).unwrap();
        for w in &out.attn_weights {
            assert_eq!(tape.value(*w).data(), &[1.0]);
        }

        // Independent recomputation: with a single key the attention output is
        // the value projection of the normalised token.
        let v = |id| store.value(id);
        let ln = |t: &Tensor, g: &Tensor, b: &Tensor| {
            let n = t.cols() as f64;
            let mean = t.sum() / n;
            let var = t.data().iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + crate::nn::LN_EPS).sqrt();
            Tensor::new(1, t.cols(), (0..t.cols()).map(|c| (t.get(0, c) - mean) * is * g.get(0, c) + b.get(0, c)).collect())
                .unwrap()
        };
        let lin = |t: &Tensor, l: &Linear| {
            let mut y = t.matmul(v(l.w)).unwrap();
            y.add_assign(v(l.b));
            y
        };
        let mut h = lin(&x, &enc.proj);
        h.add_assign(&v(enc.pos.unwrap()).slice_rows(0, 1));
        let blk = &enc.block;
        let a = lin(&lin(&ln(&h, v(blk.ln_attn.gain), v(blk.ln_attn.bias)), &blk.attn.v), &blk.attn.o);
        h.add_assign(&a);
        let f = lin(
            &lin(&ln(&h, v(blk.ln_ffn.gain), v(blk.ln_ffn.bias)), &blk.ffn.up).map(|z| z.max(0.0)),
            &blk.ffn.down,
        );
        h.add_assign(&f);
        assert!(tape.value(out.hidden).max_abs_diff(&h) < 1e-12);
    }

    #[test]
    fn masked_tail_does_not_leak() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(7);
        let enc = ModalityEncoder::new(&mut store, &cfg, Modality::Text, 3, &mut rng);
        let mask = [true, true, true, false, false];
        let a = rand_tensor(5, 3, 10);
        let mut b = a.clone();
        for r in 3..5 {
            for c in 0..3 {
                b.set(r, c, 100.0 * (r + c) as f64 - 7.0);
            }
        }
        let run = |x: &Tensor, rng: &mut Rng| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::eval(rng);
            let out = enc.encode(&mut tape, &store, x, &mask, &mut ctx).unwrap();
            tape.value(out.hidden).clone()
        };
        let (ha, hb) = (run(&a, &mut rng), run(&b, &mut rng));
        assert!(ha.max_abs_diff(&hb) < 1e-6);
        assert!(ha.row(4).iter().all(|&z| z == 0.0));
    }

    #[test]
    fn encoders_share_no_parameters() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1);
        let encs = Encoders::new(&mut store, &cfg, [3, 2, 4], &mut rng);
        let inputs = [rand_tensor(4, 3, 1), rand_tensor(2, 2, 2), rand_tensor(3, 4, 3)];
        let encode_all = |store: &ParamStore, rng: &mut Rng| -> Vec<Tensor> {
            let mut tape = Tape::new();
            let mut ctx = Ctx::eval(rng);
            Modality::ALL
                .iter()
                .map(|&m| {
                    let x = &inputs[m.index()];
                    let e = encs
                        .get(m)
                        .encode(&mut tape, store, x, &vec![true; x.rows()], &mut ctx)
                        .unwrap();
                    tape.value(e.hidden).clone()
                })
                .collect()
        };
        let before = encode_all(&store, &mut rng);
        let mut zeroed = store.clone();
        for p in zeroed.iter_mut().filter(|p| p.name.starts_with("encoder.text.")) {
            p.value.data_mut().fill(0.0);
        }
        let after = encode_all(&zeroed, &mut rng);
        assert_ne!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
        assert_eq!(before[2], after[2]);
    }
}
