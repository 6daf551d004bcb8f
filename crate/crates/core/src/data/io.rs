use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, Modality, Sample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    label: f64,
    text: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
    visual: Vec<Vec<f64>>,
}

impl SampleRecord {
    fn from_sample(s: &Sample) -> Self {
        Self {
            id: s.id.clone(),
            label: s.label,
            text: s.features[0].to_rows(),
            audio: s.features[1].to_rows(),
            visual: s.features[2].to_rows(),
        }
    }
}

/// Reads `manifest.json` and `samples.jsonl` from a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest =
        serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    manifest.validate()?;
    let (lo, hi) = manifest.score_range;

    let reader = BufReader::new(File::open(dir.join(SAMPLES_FILE))?);
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let mut features = Vec::with_capacity(3);
        for (m, rows) in Modality::ALL.iter().zip([rec.text, rec.audio, rec.visual]) {
            let expected = manifest.widths.get(*m);
            if rows.is_empty() {
                return Err(Error::Schema(format!("line {line_no}: {m} sequence is empty")));
            }
            for row in &rows {
                if row.len() != expected {
                    return Err(Error::Schema(format!(
                        "line {line_no}: {m} feature width {} does not match {expected}",
                        row.len()
                    )));
                }
            }
            features.push(Tensor::from_rows(&rows)?);
        }
        if !(lo..=hi).contains(&rec.label) {
            return Err(Error::Validation(format!(
                "line {line_no}: label {} outside [{lo}, {hi}]",
                rec.label
            )));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(Error::Validation(format!("line {line_no}: duplicate id '{}'", rec.id)));
        }
        let features: [Tensor; 3] = features.try_into().expect("three modalities");
        samples.push(Sample {
            id: rec.id,
            label: rec.label,
            features,
        });
    }
    let ds = Dataset { manifest, samples };
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset directory readable by [`load_dataset`].
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mf = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(mf, &ds.manifest)?;
    let mut out = BufWriter::new(File::create(dir.join(SAMPLES_FILE))?);
    for s in &ds.samples {
        serde_json::to_writer(&mut out, &SampleRecord::from_sample(s))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
