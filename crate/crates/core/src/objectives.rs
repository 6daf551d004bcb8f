//! Training objectives: regression, per-slot auxiliary regression and
//! prototype diversity, combined linearly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

/// Rows with norm at or below this are rejected before normalisation.
pub const PROTOTYPE_NORM_EPS: f64 = 1e-8;

/// Linear map from each fused slot to an auxiliary prediction.
#[derive(Clone, Debug)]
pub enum AuxHead {
    /// One `d -> 1` map applied to every slot.
    Shared(Linear),
    /// A separate `d -> 1` map per slot: weights `K x d`, biases `K x 1`.
    PerSlot { w: ParamId, b: ParamId },
}

impl AuxHead {
    pub fn shared(store: &mut ParamStore, dim: usize, rng: &mut Rng) -> Self {
        AuxHead::Shared(Linear::new(store, "aux_head", dim, 1, rng))
    }

    pub fn per_slot(store: &mut ParamStore, k: usize, dim: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (dim + 1) as f64).sqrt();
        let data = (0..k * dim).map(|_| rand::Rng::random_range(rng, -bound..bound)).collect();
        let w = store.add("aux_head.w", Tensor::new(k, dim, data).expect("shape"), true);
        let b = store.add("aux_head.b", Tensor::zeros(k, 1), false);
        AuxHead::PerSlot { w, b }
    }

    pub fn num_params(k: usize, dim: usize, per_slot: bool) -> usize {
        if per_slot {
            k * (dim + 1)
        } else {
            dim + 1
        }
    }

    /// `K x 1` auxiliary predictions for a `K x d` fused matrix.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, fused: Var) -> Result<Var> {
        match self {
            AuxHead::Shared(lin) => lin.forward(tape, store, fused),
            AuxHead::PerSlot { w, b } => {
                let w = tape.param(store, *w);
                let b = tape.param(store, *b);
                let prod = tape.mul(fused, w)?;
                let s = tape.sum(prod, Some(1))?;
                tape.add(s, b)
            }
        }
    }
}

fn check_labels(tape: &Tape, preds: Var, labels: &[f64]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    if tape.shape(preds) != (labels.len(), 1) {
        return Err(Error::Contract(format!(
            "{} labels for predictions of shape {:?}",
            labels.len(),
            tape.shape(preds)
        )));
    }
    Ok(())
}

/// Mean squared error of a `B x 1` prediction column.
pub fn reg_loss(tape: &mut Tape, preds: Var, labels: &[f64]) -> Result<Var> {
    check_labels(tape, preds, labels)?;
    let y = tape.constant(Tensor::column_vector(labels));
    let diff = tape.sub(preds, y)?;
    let sq = tape.square(diff);
    tape.mean(sq, None)
}

/// Mean over samples and slots of `(y_aux_k - y)^2`; `aux_preds[i]` is the
/// `K x 1` column for sample `i`.
pub fn aux_loss(tape: &mut Tape, aux_preds: &[Var], labels: &[f64]) -> Result<Var> {
    if aux_preds.len() != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!(
            "{} auxiliary prediction sets for {} labels",
            aux_preds.len(),
            labels.len()
        )));
    }
    let rows: Vec<Var> = aux_preds.iter().map(|&p| tape.transpose(p)).collect();
    let stacked = tape.concat(&rows, 0)?;
    let y = tape.constant(Tensor::column_vector(labels));
    let diff = tape.sub(stacked, y)?;
    let sq = tape.square(diff);
    tape.mean(sq, None)
}

/// `||M_bar M_bar^T - I||_F^2` with `M_bar` the row-normalised prototypes.
pub fn div_loss(tape: &mut Tape, prototypes: Var) -> Result<Var> {
    let mv = tape.value(prototypes);
    let k = mv.rows();
    for r in 0..k {
        let norm = mv.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= PROTOTYPE_NORM_EPS {
            return Err(Error::DegeneratePrototype { row: r, norm });
        }
    }
    let sq = tape.square(prototypes);
    let row_sq = tape.sum(sq, Some(1))?;
    let norms = tape.sqrt(row_sq);
    let unit = tape.div(prototypes, norms)?;
    let gram = tape.matmul_bt(unit, unit)?;
    let eye = tape.constant(Tensor::identity(k));
    let diff = tape.sub(gram, eye)?;
    let d2 = tape.square(diff);
    tape.sum(d2, None)
}

/// Scalar values of every loss term for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_reg: f64,
    pub l_aux: f64,
    pub l_div: f64,
    pub total: f64,
    pub lambda_aux: f64,
    pub lambda_div: f64,
}

impl LossBreakdown {
    pub fn combine(l_reg: f64, l_aux: f64, l_div: f64, lambda_aux: f64, lambda_div: f64) -> Self {
        Self {
            l_reg,
            l_aux,
            l_div,
            total: l_reg + lambda_aux * l_aux + lambda_div * l_div,
            lambda_aux,
            lambda_div,
        }
    }
}

/// `L = L_reg + lambda_aux * L_aux + lambda_div * L_div`.
pub fn total_loss(
    tape: &mut Tape,
    reg: Var,
    aux: Var,
    div: Var,
    lambda_aux: f64,
    lambda_div: f64,
) -> Result<(Var, LossBreakdown)> {
    if lambda_aux < 0.0 || lambda_div < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let a = tape.scale(aux, lambda_aux);
    let d = tape.scale(div, lambda_div);
    let t = tape.add(reg, a)?;
    let total = tape.add(t, d)?;
    let mut parts = LossBreakdown::combine(
        tape.value(reg).item(),
        tape.value(aux).item(),
        tape.value(div).item(),
        lambda_aux,
        lambda_div,
    );
    parts.total = tape.value(total).item();
    Ok((total, parts))
}
