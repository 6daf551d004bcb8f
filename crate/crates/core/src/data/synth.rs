use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, Modality, Sample, Splits, Widths};
use crate::autodiff::{seeded_rng, Rng, Tensor};
use crate::error::{Error, Result};

/// Parameters of the synthetic generator.
///
/// Every modality carries its own latent score; `weights` mixes the three
/// latents into the label, so they set how informative each modality is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Inclusive (min, max) sequence lengths in (text, audio, visual) order.
    pub lengths: [(usize, usize); 3],
    pub widths: [usize; 3],
    /// Informativeness weights (text, audio, visual); non-negative, sum to 1.
    pub weights: [f64; 3],
    pub noise: f64,
    pub score_range: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 256,
            n_valid: 64,
            n_test: 64,
            lengths: [(3, 8), (3, 8), (3, 8)],
            widths: [8, 6, 6],
            weights: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            noise: 0.1,
            score_range: (-3.0, 3.0),
        }
    }
}

impl SynthSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: SynthSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|&w| w < 0.0) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "informativeness weights {:?} must be non-negative and sum to 1",
                self.weights
            )));
        }
        for (lo, hi) in self.lengths {
            if lo < 1 || lo > hi {
                return Err(Error::Config(format!("invalid length range ({lo}, {hi})")));
            }
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        if !(self.score_range.0 < self.score_range.1) {
            return Err(Error::Config("score range is empty".into()));
        }
        Ok(())
    }
}

/// Two orthonormal directions in `R^width`: the signal axis and a nuisance
/// axis (absent when `width == 1`).
fn random_frame(width: usize, rng: &mut Rng) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut u = gauss(width);
    normalize(&mut u);
    if width == 1 {
        return (u, None);
    }
    let mut v = gauss(width);
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(x, ux)| *x -= dot * ux);
    normalize(&mut v);
    (u, Some(v))
}

/// Deterministic synthetic dataset. Each timestep of modality `m` is
/// `s_m * u_m + r * n_m + noise`, with `u_m`, `n_m` a fixed orthonormal pair
/// and `r ~ N(0, 1)` drawn per timestep.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let frames: Vec<_> = spec.widths.iter().map(|&w| random_frame(w, &mut rng)).collect();
    let (lo, hi) = spec.score_range;

    let mut samples = Vec::new();
    let mut splits = Splits::default();
    for (name, n, ids) in [
        ("train", spec.n_train, &mut splits.train),
        ("valid", spec.n_valid, &mut splits.valid),
        ("test", spec.n_test, &mut splits.test),
    ] {
        for i in 0..n {
            let latents: [f64; 3] = std::array::from_fn(|_| rng.random_range(lo..=hi));
            let label = latents
                .iter()
                .zip(&spec.weights)
                .map(|(s, w)| s * w)
                .sum::<f64>()
                .clamp(lo, hi);
            let mut features = Vec::with_capacity(3);
            for m in Modality::ALL {
                let k = m.index();
                let (min_len, max_len) = spec.lengths[k];
                let len = rng.random_range(min_len..=max_len);
                let width = spec.widths[k];
                let (u, nuisance) = &frames[k];
                let mut data = Vec::with_capacity(len * width);
                for _ in 0..len {
                    let r: f64 = StandardNormal.sample(&mut rng);
                    for j in 0..width {
                        let mut x = latents[k] * u[j];
                        if let Some(nv) = nuisance {
                            x += r * nv[j];
                        }
                        if spec.noise > 0.0 {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            x += spec.noise * e;
                        }
                        data.push(x);
                    }
                }
                features.push(Tensor::new(len, width, data)?);
            }
            let id = format!("{name}-{i:05}");
            ids.push(id.clone());
            samples.push(Sample {
                id,
                label,
                features: features.try_into().expect("three modalities"),
            });
        }
    }

    let ds = Dataset {
        manifest: DatasetManifest {
            score_range: spec.score_range,
            widths: Widths {
                text: spec.widths[0],
                audio: spec.widths[1],
                visual: spec.widths[2],
            },
            splits,
        },
        samples,
    };
    ds.validate()?;
    Ok(ds)
}
