//! Samples, dataset files, synthetic generation and batching.

mod batch;
mod io;
mod synth;

pub use batch::{batch_iter, Batch, BatchIter, PaddedModality};
pub use io::{load_dataset, save_dataset, MANIFEST_FILE, SAMPLES_FILE};
pub use synth::{generate_synthetic, SynthSpec};

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Input stream. Column order everywhere is (text, audio, visual).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> char {
        match self {
            Modality::Text => 't',
            Modality::Audio => 'a',
            Modality::Visual => 'v',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "t" | "text" => Ok(Modality::Text),
            "a" | "audio" => Ok(Modality::Audio),
            "v" | "visual" => Ok(Modality::Visual),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

/// One utterance: a sentiment label plus a feature sequence per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: f64,
    /// Indexed by [`Modality::index`]; each is `L_m x d_m` with `L_m >= 1`.
    pub features: [Tensor; 3],
}

impl Sample {
    pub fn feats(&self, m: Modality) -> &Tensor {
        &self.features[m.index()]
    }

    /// Copy with the listed modalities' features replaced by zeros of the
    /// same shape.
    pub fn with_zeroed(&self, zeroed: &[Modality]) -> Sample {
        let mut s = self.clone();
        for &m in zeroed {
            let (r, c) = s.features[m.index()].shape();
            s.features[m.index()] = Tensor::zeros(r, c);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub text: usize,
    pub audio: usize,
    pub visual: usize,
}

impl Widths {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.text, self.audio, self.visual]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Sidecar metadata for a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub score_range: (f64, f64),
    pub widths: Widths,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.score_range;
        if !(lo < hi) {
            return Err(Error::Validation(format!("score range ({lo}, {hi}) is empty")));
        }
        if self.widths.as_array().contains(&0) {
            return Err(Error::Validation("feature widths must be positive".into()));
        }
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Valid, Split::Test] {
            for id in self.splits.get(split) {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Validation(format!("id '{id}' appears in more than one split")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Checks cross-file consistency: split ids exist, labels in range.
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let ids: HashSet<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        for split in [Split::Train, Split::Valid, Split::Test] {
            for id in self.manifest.splits.get(split) {
                if !ids.contains(id.as_str()) {
                    return Err(Error::Validation(format!("split id '{id}' has no sample")));
                }
            }
        }
        Ok(())
    }

    /// Samples of one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        let by_id: HashMap<&str, &Sample> =
            self.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        self.manifest
            .splits
            .get(split)
            .iter()
            .filter_map(|id| by_id.get(id.as_str()).copied())
            .collect()
    }
}
