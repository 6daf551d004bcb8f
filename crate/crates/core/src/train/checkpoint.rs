//! Single-file binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field | encoding |
//! |---|---|
//! | magic | 8 bytes `PSNTCKPT` |
//! | version | `u32` |
//! | config | `u64` byte length, then UTF-8 TOML |
//! | input widths | 3 x `u64` (text, audio, visual) |
//! | rng | seed `u64`, stream `u64`, word position `u128` |
//! | step | `u64` |
//! | best valid MAE | `f64`, NaN when none has been recorded |
//! | parameters | `u64` count, then per tensor: `u64` name length, name, `u64` rows, `u64` cols, `rows*cols` x `f64` |
//! | optimizer | beta1, beta2, eps, weight decay as `f64`; `u64` update count; first moments then second moments for every tensor, in parameter order |
//!
//! Parameters appear in registration order, which `build_variant` fixes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, RngState, Tensor};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{build_variant, Model};

use super::optimizer::AdamW;

pub const MAGIC: &[u8; 8] = b"PSNTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub widths: [usize; 3],
    pub rng: RngState,
    /// Optimizer updates completed.
    pub step: u64,
    pub best_valid_mae: Option<f64>,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn capture(
        config: &Config,
        widths: [usize; 3],
        store: &ParamStore,
        optimizer: &AdamW,
        rng: RngState,
        step: u64,
        best_valid_mae: Option<f64>,
    ) -> Self {
        Self {
            config: config.clone(),
            widths,
            rng,
            step,
            best_valid_mae,
            params: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            optimizer: optimizer.clone(),
        }
    }

    /// Rebuilds the model and loads the stored parameter values into it.
    pub fn restore_model(&self) -> Result<(Model, ParamStore)> {
        let (model, mut store) = build_variant(&self.config, self.widths)?;
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (p, (name, value)) in store.iter_mut().zip(&self.params) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match model tensor {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok((model, store))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.config.to_toml_string().as_bytes());
        for w in self.widths {
            put_u64(&mut out, w as u64);
        }
        put_u64(&mut out, self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u64(&mut out, self.step);
        put_f64(&mut out, self.best_valid_mae.unwrap_or(f64::NAN));
        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in &self.params {
            put_bytes(&mut out, name.as_bytes());
            put_tensor(&mut out, t);
        }
        let o = &self.optimizer;
        for x in [o.beta1, o.beta2, o.eps, o.weight_decay] {
            put_f64(&mut out, x);
        }
        put_u64(&mut out, o.t);
        for t in o.m.iter().chain(&o.v) {
            for &x in t.data() {
                put_f64(&mut out, x);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let toml = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = Config::from_toml_str(&toml)?;
        let widths = [r.usize()?, r.usize()?, r.usize()?];
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes")),
        };
        let step = r.u64()?;
        let best = r.f64()?;
        let n = r.usize()?;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = r.usize()?;
            let cols = r.usize()?;
            params.push((name, r.tensor(rows, cols)?));
        }
        let (beta1, beta2, eps, weight_decay) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let t = r.u64()?;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (_, p) in &params {
            m.push(r.tensor(p.rows(), p.cols())?);
        }
        for (_, p) in &params {
            v.push(r.tensor(p.rows(), p.cols())?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            widths,
            rng,
            step,
            best_valid_mae: (!best.is_nan()).then_some(best),
            params,
            optimizer: AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
                t,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u64(out, t.rows() as u64);
    put_u64(out, t.cols() as u64);
    for &x in t.data() {
        put_f64(out, x);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::Checkpoint(format!("truncated tensor at byte {}", self.pos)))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::stream_rng;

    fn sample() -> Checkpoint {
        let cfg = Config {
            num_prototypes: 2,
            hidden_dim: 4,
            heads: 2,
            layers: 1,
            max_seq_len: 8,
            ..Config::default()
        };
        let widths = [3, 2, 2];
        let (_, mut store) = build_variant(&cfg, widths).unwrap();
        let mut opt = AdamW::new(&store, cfg.weight_decay);
        for p in store.iter_mut() {
            p.grad.data_mut().fill(0.25);
        }
        opt.step(&mut store, 1e-3).unwrap();
        let rng = stream_rng(5, 3);
        Checkpoint::capture(&cfg, widths, &store, &opt, RngState::capture(5, &rng), 1, Some(0.5))
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let (_, store) = back.restore_model().unwrap();
        for (p, (_, v)) in store.iter().zip(&c.params) {
            assert_eq!(&p.value, v);
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
