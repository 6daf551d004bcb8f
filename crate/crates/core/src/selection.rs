//! Prototype-conditioned modality selection.
//!
//! A shared scorer rates every modality response at every slot against that
//! slot's prototype. Scores are normalised across the three modalities per
//! slot and the responses are mixed with the resulting weights.

use crate::autodiff::{ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

/// `g`: `2d -> d -> 1` MLP with ReLU, one instance for all slots and modalities.
#[derive(Clone, Debug)]
pub struct Scorer {
    pub hidden: Linear,
    pub out: Linear,
}

impl Scorer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), 2 * dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, 1, rng),
        }
    }

    pub fn num_params(dim: usize) -> usize {
        Linear::num_params(2 * dim, dim) + Linear::num_params(dim, 1)
    }

    /// Scores each row of `responses` against the matching row of
    /// `prototypes`; returns a column of reliability scores.
    pub fn score(&self, tape: &mut Tape, store: &ParamStore, responses: Var, prototypes: Var) -> Result<Var> {
        if tape.shape(responses) != tape.shape(prototypes) {
            return Err(Error::Schema(format!(
                "scorer inputs differ in shape: {:?} vs {:?}",
                tape.shape(responses),
                tape.shape(prototypes)
            )));
        }
        let x = tape.concat(&[responses, prototypes], 1)?;
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }
}

/// Per-slot modality weights and the fused prototype tokens.
#[derive(Clone, Copy, Debug)]
pub struct Selection {
    /// Raw scores `e`, `K x 3` in (t, a, v) column order.
    pub scores: Var,
    /// Softmax of `scores` along each row.
    pub alpha: Var,
    /// `Z_fused`, `K x d`.
    pub fused: Var,
}

fn check_responses(tape: &Tape, responses: &[Var; 3]) -> Result<()> {
    let s = tape.shape(responses[0]);
    for &r in &responses[1..] {
        if tape.shape(r) != s {
            return Err(Error::Dimension {
                op: "fuse",
                left: s,
                right: tape.shape(r),
            });
        }
    }
    Ok(())
}

/// `z_k = sum_m alpha[k, m] * z^m_k`.
fn fuse(tape: &mut Tape, responses: &[Var; 3], alpha: Var) -> Result<Var> {
    let mut fused = None;
    for (m, &z) in responses.iter().enumerate() {
        let a = tape.slice_cols(alpha, m, 1)?;
        let term = tape.mul(z, a)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(fused.expect("three modalities"))
}

/// Scores, normalises and fuses. `prototypes[m]` is the bank that modality
/// `m` was extracted with (the same node three times for a shared bank).
pub fn select_and_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    responses: &[Var; 3],
    prototypes: &[Var; 3],
    scorer: &Scorer,
) -> Result<Selection> {
    check_responses(tape, responses)?;
    let mut cols = Vec::with_capacity(3);
    for (&z, &m) in responses.iter().zip(prototypes) {
        cols.push(scorer.score(tape, store, z, m)?);
    }
    let scores = tape.concat(&cols, 1)?;
    normalize_and_fuse(tape, responses, scores)
}

/// Row-wise softmax of given `K x 3` scores followed by weighted fusion.
pub fn normalize_and_fuse(tape: &mut Tape, responses: &[Var; 3], scores: Var) -> Result<Selection> {
    check_responses(tape, responses)?;
    let k = tape.shape(responses[0]).0;
    if tape.shape(scores) != (k, 3) {
        return Err(Error::Dimension {
            op: "normalize_and_fuse",
            left: (k, 3),
            right: tape.shape(scores),
        });
    }
    let alpha = tape.softmax(scores, 1)?;
    let fused = fuse(tape, responses, alpha)?;
    Ok(Selection { scores, alpha, fused })
}

/// Fixed equal weights of 1/3 per modality.
pub fn uniform_fuse(tape: &mut Tape, responses: &[Var; 3]) -> Result<Selection> {
    check_responses(tape, responses)?;
    let k = tape.shape(responses[0]).0;
    let scores = tape.constant(Tensor::zeros(k, 3));
    let alpha = tape.constant(Tensor::filled(k, 3, 1.0 / 3.0));
    let fused = fuse(tape, responses, alpha)?;
    Ok(Selection { scores, alpha, fused })
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::autodiff::seeded_rng;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_inputs_identical_scores() {
        let mut rng = seeded_rng(0);
        let mut store = ParamStore::new();
        let scorer = Scorer::new(&mut store, "g", 6, &mut rng);
        let mut tape = Tape::new();
        let z = tape.constant(rand_tensor(3, 6, &mut rng));
        let m = tape.constant(rand_tensor(3, 6, &mut rng));
        let responses = [z, z, z];
        let sel = select_and_fuse(&mut tape, &store, &responses, &[m, m, m], &scorer).unwrap();
        let e = tape.value(sel.scores);
        for k in 0..3 {
            assert_eq!(e.get(k, 0), e.get(k, 1));
            assert_eq!(e.get(k, 1), e.get(k, 2));
        }
    }

    #[test]
    fn zero_final_layer_gives_uniform_alpha_and_mean_fusion() {
        let mut rng = seeded_rng(1);
        let mut store = ParamStore::new();
        let scorer = Scorer::new(&mut store, "g", 4, &mut rng);
        store.value_mut(scorer.out.w).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let zs: Vec<Tensor> = (0..3).map(|_| rand_tensor(2, 4, &mut rng)).collect();
        let responses = [0, 1, 2].map(|i| tape.constant(zs[i].clone()));
        let m = tape.constant(rand_tensor(2, 4, &mut rng));
        let sel = select_and_fuse(&mut tape, &store, &responses, &[m, m, m], &scorer).unwrap();
        assert!(tape.value(sel.scores).data().iter().all(|&e| e == 0.0));
        assert!(tape.value(sel.alpha).data().iter().all(|&a| a == 1.0 / 3.0));
        let uni = uniform_fuse(&mut tape, &responses).unwrap();
        assert_eq!(tape.value(uni.fused), tape.value(sel.fused));
        let f = tape.value(sel.fused);
        for k in 0..2 {
            for j in 0..4 {
                let mean = (zs[0].get(k, j) + zs[1].get(k, j) + zs[2].get(k, j)) / 3.0;
                assert!((f.get(k, j) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn uniform_weights_are_exact_thirds() {
        let mut rng = seeded_rng(2);
        let mut tape = Tape::new();
        let responses = [0, 1, 2].map(|_| tape.constant(rand_tensor(5, 3, &mut rng)));
        let sel = uniform_fuse(&mut tape, &responses).unwrap();
        assert!(tape.value(sel.alpha).data().iter().all(|&a| a == 1.0 / 3.0));
    }

    #[test]
    fn mismatched_scorer_inputs_rejected() {
        let mut rng = seeded_rng(0);
        let mut store = ParamStore::new();
        let scorer = Scorer::new(&mut store, "g", 4, &mut rng);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(1, 4));
        let m = tape.constant(Tensor::zeros(1, 3));
        assert!(matches!(scorer.score(&mut tape, &store, z, m), Err(Error::Schema(_))));
    }
}
