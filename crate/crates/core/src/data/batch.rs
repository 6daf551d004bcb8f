use rand::seq::SliceRandom;

use super::{Modality, Sample};
use crate::autodiff::{Rng, Tensor};
use crate::error::{Error, Result};

/// One modality of a batch, zero-padded to the longest sequence.
#[derive(Clone, Debug)]
pub struct PaddedModality {
    /// One `max_len x d_m` matrix per sample.
    pub feats: Vec<Tensor>,
    /// `true` marks real positions.
    pub masks: Vec<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub labels: Vec<f64>,
    pub modalities: [PaddedModality; 3],
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn modality(&self, m: Modality) -> &PaddedModality {
        &self.modalities[m.index()]
    }

    pub fn from_samples(samples: &[&Sample]) -> Batch {
        let modalities = Modality::ALL.map(|m| {
            let max_len = samples.iter().map(|s| s.feats(m).rows()).max().unwrap_or(0);
            let mut feats = Vec::with_capacity(samples.len());
            let mut masks = Vec::with_capacity(samples.len());
            for s in samples {
                let x = s.feats(m);
                let (len, width) = x.shape();
                let mut data = x.data().to_vec();
                data.resize(max_len * width, 0.0);
                feats.push(Tensor::new(max_len, width, data).expect("padded shape"));
                masks.push((0..max_len).map(|i| i < len).collect());
            }
            PaddedModality { feats, masks }
        });
        Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            modalities,
        }
    }
}

pub struct BatchIter<'a> {
    samples: &'a [&'a Sample],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let chunk: Vec<&Sample> = self.order[self.pos..end].iter().map(|&i| self.samples[i]).collect();
        self.pos = end;
        Some(Batch::from_samples(&chunk))
    }
}

/// Yields padded batches; with `shuffle` the order is a permutation drawn
/// from `rng`, otherwise input order is kept.
pub fn batch_iter<'a>(
    samples: &'a [&'a Sample],
    batch_size: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(BatchIter {
        samples,
        order,
        batch_size,
        pos: 0,
    })
}
