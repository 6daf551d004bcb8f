//! Plain nested-vector reference implementations used as independent
//! oracles for the tape-based model code.

#![allow(dead_code)]

use protosent::autodiff::{ParamStore, Tensor};
use protosent::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use protosent::prototype::CrossAttention;
use protosent::selection::Scorer;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    t.to_rows()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn linear(store: &ParamStore, lin: &Linear, x: &Mat) -> Mat {
    let w = to_mat(store.value(lin.w));
    let b = store.value(lin.b).row(0).to_vec();
    mm(x, &w)
        .into_iter()
        .map(|row| row.iter().zip(&b).map(|(v, c)| v + c).collect())
        .collect()
}

fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| v.max(0.0)).collect()).collect()
}

fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &Mat) -> Mat {
    let g = store.value(ln.gain).row(0);
    let b = store.value(ln.bias).row(0);
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / sd * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn masked_softmax(row: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    masked_softmax(row, &vec![true; row.len()])
}

fn attention(store: &ParamStore, mha: &MultiHeadAttention, query: &Mat, kv: &Mat, mask: &[bool]) -> Mat {
    let q = linear(store, &mha.q, query);
    let k = linear(store, &mha.k, kv);
    let v = linear(store, &mha.v, kv);
    let d = q[0].len();
    let dh = d / mha.heads;
    let mut cat = vec![vec![0.0; d]; q.len()];
    for h in 0..mha.heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = masked_softmax(&scores, mask);
            for c in cols.clone() {
                cat[i][c] = (0..k.len()).map(|j| w[j] * v[j][c]).sum();
            }
        }
    }
    linear(store, &mha.o, &cat)
}

fn ffn(store: &ParamStore, f: &FeedForward, x: &Mat) -> Mat {
    linear(store, &f.down, &relu(&linear(store, &f.up, x)))
}

/// `Z~ = LN(M + CrossAttn(M, H, H))`, `Z = LN(Z~ + FFN(Z~))`.
pub fn extract(store: &ParamStore, ca: &CrossAttention, m: &Mat, h: &Mat, mask: &[bool]) -> Mat {
    let z = layer_norm(store, &ca.ln_attn, &add(m, &attention(store, &ca.attn, m, h, mask)));
    layer_norm(store, &ca.ln_ffn, &add(&z, &ffn(store, &ca.ffn, &z)))
}

/// Scores `K x 3`, weights `K x 3`, fused `K x d`.
pub fn select(store: &ParamStore, scorer: &Scorer, z: &[Mat; 3], m: &[Mat; 3]) -> (Mat, Mat, Mat) {
    let k = z[0].len();
    let d = z[0][0].len();
    let mut scores = vec![vec![0.0; 3]; k];
    for (mi, (zm, mm_)) in z.iter().zip(m).enumerate() {
        for s in 0..k {
            let input = vec![zm[s].iter().chain(&mm_[s]).copied().collect::<Vec<f64>>()];
            let hidden = relu(&linear(store, &scorer.hidden, &input));
            scores[s][mi] = linear(store, &scorer.out, &hidden)[0][0];
        }
    }
    let alpha: Mat = scores.iter().map(|r| softmax(r)).collect();
    let fused = (0..k)
        .map(|s| (0..d).map(|j| (0..3).map(|mi| alpha[s][mi] * z[mi][s][j]).sum()).collect())
        .collect();
    (scores, alpha, fused)
}

pub fn max_abs_diff(a: &Mat, b: &Tensor) -> f64 {
    assert_eq!((a.len(), a[0].len()), b.shape());
    let mut m: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((v - b.get(i, j)).abs());
        }
    }
    m
}
