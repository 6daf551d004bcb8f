//! Per-sample gate and selection traces, with simple SVG gate plots.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{seeded_rng, ParamStore, Tape};
use crate::data::{Dataset, Modality, Sample, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Ctx;

/// Tolerance for the row-sum check on selection weights.
pub const ALPHA_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub label: f64,
    pub prediction: f64,
    /// One (t, a, v) gate triple per backbone layer; empty when ungated.
    pub gates: Vec<[f64; 3]>,
    /// `K` rows of (t, a, v) selection weights.
    pub alpha: Vec<[f64; 3]>,
}

impl TraceRecord {
    /// Gates strictly inside (0, 1), finite values and unit alpha rows.
    pub fn check(&self) -> Result<()> {
        if !self.prediction.is_finite() {
            return Err(Error::Numeric(format!("{}: non-finite prediction", self.id)));
        }
        for (l, g) in self.gates.iter().enumerate() {
            if g.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
                return Err(Error::Numeric(format!("{}: layer {l} gate {g:?} outside (0, 1)", self.id)));
            }
        }
        for (k, row) in self.alpha.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ALPHA_SUM_TOL || row.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
                return Err(Error::Numeric(format!("{}: selection row {k} {row:?} is not a distribution", self.id)));
            }
        }
        Ok(())
    }
}

fn triples(t: &crate::autodiff::Tensor) -> Vec<[f64; 3]> {
    (0..t.rows()).map(|r| [t.get(r, 0), t.get(r, 1), t.get(r, 2)]).collect()
}

/// Eval-mode trace of each sample.
pub fn trace_samples(model: &Model, store: &ParamStore, samples: &[&Sample]) -> Result<Vec<TraceRecord>> {
    let mut rng = seeded_rng(0);
    let gating = model.default_gating();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut rng);
        let masks: Vec<Vec<bool>> = s.features.iter().map(|f| vec![true; f.rows()]).collect();
        let feats = Modality::ALL.map(|m| s.feats(m));
        let masks = [0, 1, 2].map(|i| masks[i].as_slice());
        let fwd = model.forward_sample(&mut tape, store, feats, masks, &gating, &mut ctx)?;
        let rec = TraceRecord {
            id: s.id.clone(),
            label: s.label,
            prediction: tape.value(fwd.trace.prediction).item(),
            gates: fwd.trace.gates.iter().flat_map(|&g| triples(tape.value(g))).collect(),
            alpha: triples(tape.value(fwd.selection.alpha)),
        };
        rec.check()?;
        out.push(rec);
    }
    Ok(out)
}

/// Traces the test split and writes one JSON record per line to `out_path`.
pub fn extract_traces(model: &Model, store: &ParamStore, dataset: &Dataset, out_path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let records = trace_samples(model, store, &dataset.split(Split::Test))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_path)?);
    for r in &records {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(records)
}

/// Mean selection weight per modality over all slots and records.
pub fn mean_alpha(records: &[TraceRecord]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for r in records {
        for row in &r.alpha {
            for m in 0..3 {
                sum[m] += row[m];
            }
            n += 1;
        }
    }
    sum.map(|s| if n == 0 { 0.0 } else { s / n as f64 })
}

const COLORS: [&str; 3] = ["#1f77b4", "#ff7f0e", "#2ca02c"];

/// One strip plot per layer: gate values of each modality, split into
/// negative-label and non-negative-label samples. Returns the files written.
pub fn write_gate_plots(records: &[TraceRecord], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let layers = records.iter().map(|r| r.gates.len()).max().unwrap_or(0);
    let mut written = Vec::new();
    for l in 0..layers {
        let path = dir.join(format!("gates_layer{l}.svg"));
        std::fs::write(&path, gate_svg(records, l))?;
        written.push(path);
    }
    Ok(written)
}

fn gate_svg(records: &[TraceRecord], layer: usize) -> String {
    let (w, h) = (480.0, 300.0);
    let (left, right, top, bottom) = (50.0, 20.0, 30.0, 40.0);
    let plot_h = h - top - bottom;
    let col_w = (w - left - right) / 6.0;
    let y_of = |g: f64| top + (1.0 - g) * plot_h;
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(s, r#"<text x="{}" y="18" text-anchor="middle">layer {layer} gates</text>"#, w / 2.0);
    let _ = write!(
        s,
        r##"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="#000"/>"##,
        top + plot_h
    );
    for tick in [0.0, 0.5, 1.0] {
        let y = y_of(tick);
        let _ = write!(
            s,
            r##"<text x="{}" y="{}" text-anchor="end">{tick}</text><line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##,
            left - 6.0,
            y + 4.0,
            w - right
        );
    }
    for (gi, negative) in [true, false].into_iter().enumerate() {
        for m in 0..3 {
            let col = gi * 3 + m;
            let cx = left + col_w * (col as f64 + 0.5);
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| (r.label < 0.0) == negative)
                .filter_map(|r| r.gates.get(layer).map(|g| g[m]))
                .collect();
            for (i, v) in vals.iter().enumerate() {
                let jitter = ((i * 37) % 17) as f64 / 17.0 - 0.5;
                let _ = write!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}" fill-opacity="0.5"/>"#,
                    cx + jitter * col_w * 0.5,
                    y_of(*v),
                    COLORS[m]
                );
            }
            if !vals.is_empty() {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let _ = write!(
                    s,
                    r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#000" stroke-width="2"/>"##,
                    cx - col_w * 0.35,
                    y_of(mean),
                    cx + col_w * 0.35,
                    y_of(mean)
                );
            }
            let _ = write!(
                s,
                r#"<text x="{cx:.2}" y="{}" text-anchor="middle">{}</text>"#,
                h - bottom + 14.0,
                Modality::ALL[m].short()
            );
        }
        let _ = write!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            left + col_w * (gi as f64 * 3.0 + 1.5),
            h - bottom + 30.0,
            if negative { "negative" } else { "non-negative" }
        );
    }
    s.push_str("</svg>\n");
    s
}
