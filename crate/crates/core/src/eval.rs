//! Batched inference, split evaluation and the missing-modality protocol.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{seeded_rng, ParamStore, Tape};
use crate::data::{batch_iter, Dataset, Modality, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, MetricReport};
use crate::model::Model;
use crate::nn::Ctx;

/// Eval-mode predictions in input order.
pub fn predict(model: &Model, store: &ParamStore, samples: &[&Sample], batch_size: usize) -> Result<Vec<f64>> {
    // Eval mode never draws from the generator.
    let mut rng = seeded_rng(0);
    let mut out = Vec::with_capacity(samples.len());
    for batch in batch_iter(samples, batch_size, &mut rng, false)? {
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut rng);
        let fwd = model.forward_batch(&mut tape, store, &batch, &mut ctx)?;
        out.extend_from_slice(tape.value(fwd.preds).data());
    }
    Ok(out)
}

pub fn evaluate_samples(
    model: &Model,
    store: &ParamStore,
    samples: &[&Sample],
    score_range: (f64, f64),
) -> Result<MetricReport> {
    let preds = predict(model, store, samples, model.config.batch_size)?;
    if let Some(i) = preds.iter().position(|p| !p.is_finite()) {
        return Err(Error::Numeric(format!("non-finite prediction for sample {}", samples[i].id)));
    }
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    compute_metrics(&preds, &labels, score_range)
}

pub fn evaluate_split(model: &Model, store: &ParamStore, dataset: &Dataset, split: Split) -> Result<MetricReport> {
    evaluate_samples(model, store, &dataset.split(split), dataset.manifest.score_range)
}

/// Modalities replaced by zeros at evaluation time; at most two.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    modalities: Vec<Modality>,
}

impl MaskSpec {
    pub fn new(modalities: &[Modality]) -> Result<Self> {
        let mut ms: Vec<Modality> = Vec::new();
        for &m in modalities {
            if !ms.contains(&m) {
                ms.push(m);
            }
        }
        if ms.len() > 2 {
            return Err(Error::Config("masking all three modalities leaves no input".into()));
        }
        ms.sort_by_key(|m| m.index());
        Ok(Self { modalities: ms })
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }

    /// Every mask of size 0, 1 and 2.
    pub fn all() -> Vec<MaskSpec> {
        use Modality::*;
        [
            &[][..],
            &[Text],
            &[Audio],
            &[Visual],
            &[Audio, Visual],
            &[Text, Visual],
            &[Text, Audio],
        ]
        .iter()
        .map(|m| MaskSpec::new(m).expect("valid"))
        .collect()
    }
}

impl FromStr for MaskSpec {
    type Err = Error;

    /// Comma-separated modality letters, e.g. `t` or `a,v`; empty or
    /// `none` masks nothing.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::none());
        }
        let ms = s.split(',').map(|p| p.trim().parse()).collect::<Result<Vec<Modality>>>()?;
        Self::new(&ms)
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.modalities.is_empty() {
            return f.write_str("none");
        }
        let s: Vec<String> = self.modalities.iter().map(|m| m.short().to_string()).collect();
        f.write_str(&s.join(","))
    }
}

/// Test-split metrics with the masked modalities' features zeroed. Validity
/// masks are untouched.
pub fn eval_masked(model: &Model, store: &ParamStore, dataset: &Dataset, mask: &MaskSpec) -> Result<MetricReport> {
    let zeroed: Vec<Sample> = dataset
        .split(Split::Test)
        .into_iter()
        .map(|s| s.with_zeroed(mask.modalities()))
        .collect();
    let refs: Vec<&Sample> = zeroed.iter().collect();
    evaluate_samples(model, store, &refs, dataset.manifest.score_range)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_parsing() {
        let m: MaskSpec = "a,t".parse().unwrap();
        assert_eq!(m.modalities(), &[Modality::Text, Modality::Audio]);
        assert_eq!(m.to_string(), "t,a");
        assert!("".parse::<MaskSpec>().unwrap().is_empty());
        assert!(matches!("t,a,v".parse::<MaskSpec>(), Err(Error::Config(_))));
        assert!("t,x".parse::<MaskSpec>().is_err());
        assert_eq!(MaskSpec::all().len(), 7);
    }
}
