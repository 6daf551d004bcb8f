//! Define-by-run reverse-mode tape.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! computed eagerly; [`Tape::backward`] walks the recorded nodes in reverse
//! and accumulates gradients into leaf inputs and parameters. A fresh tape
//! is built for every forward pass.

use std::collections::HashMap;

use rand::Rng as _;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};
use super::Rng;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Sqrt(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum {
        x: Var,
    },
    MulConst {
        x: Var,
        c: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Persistent gradients of input nodes, accumulated across backward calls.
    leaf_grads: HashMap<usize, Tensor>,
    param_vars: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
}

fn check_axis(axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(Error::Contract(format!("axis {axis} is invalid for rank-2 tensors")));
    }
    Ok(())
}

/// Right operand may be the same shape, `1x1`, `1xC` or `Rx1`.
fn broadcast_ok(a: (usize, usize), b: (usize, usize)) -> bool {
    (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1)
}

#[inline]
fn bidx(r: usize, c: usize, b: (usize, usize)) -> usize {
    let br = if b.0 == 1 { 0 } else { r };
    let bc = if b.1 == 1 { 0 } else { c };
    br * b.1 + bc
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = a.shape();
    let bs = b.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(f(a.get(r, c), b.data()[bidx(r, c, bs)]));
        }
    }
    Tensor::new(rows, cols, out).expect("broadcast shape")
}

/// Sums `g` (shape of the left operand) down to the broadcast shape `b`.
fn reduce_to(g: &Tensor, b: (usize, usize)) -> Tensor {
    if g.shape() == b {
        return g.clone();
    }
    let mut out = Tensor::zeros(b.0, b.1);
    let (rows, cols) = g.shape();
    for r in 0..rows {
        for c in 0..cols {
            out.data_mut()[bidx(r, c, b)] += g.get(r, c);
        }
    }
    out
}

fn softmax_values(x: &Tensor, axis: usize, key_mask: Option<&[bool]>) -> Tensor {
    let (rows, cols) = x.shape();
    let mut out = Tensor::zeros(rows, cols);
    let (outer, inner) = if axis == 1 { (rows, cols) } else { (cols, rows) };
    let at = |o: usize, i: usize| if axis == 1 { o * cols + i } else { i * cols + o };
    let keep = |o: usize, i: usize| {
        key_mask.is_none_or(|m| if axis == 1 { m[i] } else { m[o] })
    };
    for o in 0..outer {
        let mut max = f64::NEG_INFINITY;
        for i in 0..inner {
            if keep(o, i) {
                max = max.max(x.data()[at(o, i)]);
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for i in 0..inner {
            if keep(o, i) {
                let e = (x.data()[at(o, i)] - max).exp();
                out.data_mut()[at(o, i)] = e;
                total += e;
            }
        }
        for i in 0..inner {
            out.data_mut()[at(o, i)] /= total;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf input that receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Leaf input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Places a parameter on the tape. Repeated calls for the same id
    /// return the same node, so shared parameters collect every path.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.param_vars.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    /// Gradient accumulated on a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.param_order
            .iter()
            .filter_map(|(id, v)| self.leaf_grads.get(&v.0).map(|g| (*id, g)))
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.clear();
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let out = matmul_raw(av, bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::Dimension {
                op: "matmul_bt",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let out = matmul_a_bt(av, bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av.shape(), bv.shape()) {
            return Err(Error::Dimension {
                op: name,
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let out = broadcast_zip(av, bv, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    /// Elementwise `a + b`; `b` may broadcast over rows and/or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::sqrt);
        let rg = self.rg(x);
        self.push(out, Op::Sqrt(x), rg)
    }

    /// Softmax along `axis` (1 normalises each row, 0 each column), with
    /// max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(axis)?;
        if !self.value(x).all_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let out = softmax_values(self.value(x), axis, None);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Row-wise softmax restricted to columns whose `key_mask` entry is
    /// true. Excluded columns get exactly zero weight.
    pub fn masked_softmax_rows(&mut self, x: Var, key_mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if key_mask.len() != xv.cols() {
            return Err(Error::Dimension {
                op: "masked_softmax_rows",
                left: xv.shape(),
                right: (1, key_mask.len()),
            });
        }
        if !key_mask.iter().any(|&k| k) {
            return Err(Error::Contract("attention mask excludes every key".into()));
        }
        if !xv.all_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let out = softmax_values(xv, 1, Some(key_mask));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis: 1 }, rg))
    }

    /// Normalises each row to zero mean and unit variance, then applies the
    /// `1xC` affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        for p in [gain, bias] {
            if self.shape(p) != (1, cols) {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    left: (rows, cols),
                    right: self.shape(p),
                });
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Concatenates along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        check_axis(axis)?;
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (r0, c0) = self.shape(first);
        for &p in &parts[1..] {
            let (r, c) = self.shape(p);
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    left: (r0, c0),
                    right: (r, c),
                });
            }
        }
        let out = if axis == 0 {
            let rows = parts.iter().map(|&p| self.shape(p).0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(rows, c0, data)?
        } else {
            let cols = parts.iter().map(|&p| self.shape(p).1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::new(r0, cols, data)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > rows || len == 0 {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: (rows, cols),
                right: (start, len),
            });
        }
        let out = self.value(x).slice_rows(start, len);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > cols || len == 0 {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: (rows, cols),
                right: (start, len),
            });
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(rows, len, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Sum over `axis` (`None` reduces to a `1x1` scalar).
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(a) = axis {
            check_axis(a)?;
        }
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let out = match axis {
            None => Tensor::scalar(xv.sum()),
            Some(0) => {
                let mut t = Tensor::zeros(1, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        t.data_mut()[c] += xv.get(r, c);
                    }
                }
                t
            }
            Some(_) => Tensor::column_vector(
                &(0..rows).map(|r| xv.row(r).iter().sum()).collect::<Vec<_>>(),
            ),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Sum { x }, rg))
    }

    /// Mean over `axis` (`None` averages every element).
    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let n = match axis {
            None => rows * cols,
            Some(0) => rows,
            Some(_) => cols,
        };
        let s = self.sum(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Elementwise product with a fixed tensor (no gradient to `c`).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if !broadcast_ok(xv.shape(), c.shape()) {
            return Err(Error::Dimension {
                op: "mul_const",
                left: xv.shape(),
                right: c.shape(),
            });
        }
        let out = broadcast_zip(xv, &c, |a, b| a * b);
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst { x, c }, rg))
    }

    /// Inverted dropout: kept units are divided by `1 - p`. Identity (the
    /// same node) when `training` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let (rows, cols) = self.shape(x);
        let keep = 1.0 / (1.0 - p);
        let mask = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(x, Tensor::new(rows, cols, mask)?)
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of leaves and
    /// parameters are added to whatever earlier calls accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.local_grads(i, &g);
            for (parent, pg) in contributions {
                if !self.rg(parent) {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            if matches!(self.nodes[i].op, Op::Input) {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Input => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.rg(*a) {
                    out.push((*a, matmul_a_bt(g, self.value(*b))));
                }
                if self.rg(*b) {
                    out.push((*b, matmul_at_b(self.value(*a), g)));
                }
                out
            }
            Op::MatMulBt(a, b) => {
                // y = a b^T: da = g b, db = g^T a
                let mut out = Vec::with_capacity(2);
                if self.rg(*a) {
                    out.push((*a, matmul_raw(g, self.value(*b))));
                }
                if self.rg(*b) {
                    out.push((*b, matmul_at_b(g, self.value(*a))));
                }
                out
            }
            Op::Transpose(x) => vec![(*x, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, reduce_to(g, self.shape(*b)))],
            Op::Sub(a, b) => vec![
                (*a, g.clone()),
                (*b, reduce_to(&g.map(|v| -v), self.shape(*b))),
            ],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = broadcast_zip(g, bv, |x, y| x * y);
                let gb = reduce_to(&elementwise(g, av, |x, y| x * y), bv.shape());
                vec![(*a, ga), (*b, gb)]
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = broadcast_zip(g, bv, |x, y| x / y);
                let t = broadcast_zip(&elementwise(g, av, |x, y| x * y), bv, |x, y| -x / (y * y));
                vec![(*a, ga), (*b, reduce_to(&t, bv.shape()))]
            }
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * s))],
            Op::Sigmoid(x) => vec![(*x, elementwise(g, y, |gv, yv| gv * yv * (1.0 - yv)))],
            Op::Relu(x) => vec![(
                *x,
                elementwise(g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            )],
            Op::Sqrt(x) => vec![(*x, elementwise(g, y, |gv, yv| gv * 0.5 / yv))],
            Op::Softmax { x, axis } => {
                let (rows, cols) = y.shape();
                let mut gx = Tensor::zeros(rows, cols);
                if *axis == 1 {
                    for r in 0..rows {
                        let dot: f64 = (0..cols).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..cols {
                            gx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                } else {
                    for c in 0..cols {
                        let dot: f64 = (0..rows).map(|r| g.get(r, c) * y.get(r, c)).sum();
                        for r in 0..rows {
                            gx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = y.shape();
                let gain_v = self.value(*gain).data();
                let mut gx = Tensor::zeros(rows, cols);
                let mut ggain = Tensor::zeros(1, cols);
                let mut gbias = Tensor::zeros(1, cols);
                let n = cols as f64;
                for r in 0..rows {
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for c in 0..cols {
                        let gv = g.get(r, c);
                        let h = xhat.get(r, c);
                        ggain.data_mut()[c] += gv * h;
                        gbias.data_mut()[c] += gv;
                        let gh = gv * gain_v[c];
                        mean_gh += gh;
                        mean_ghx += gh * h;
                    }
                    mean_gh /= n;
                    mean_ghx /= n;
                    for c in 0..cols {
                        let gh = g.get(r, c) * gain_v[c];
                        let h = xhat.get(r, c);
                        gx.set(r, c, inv_std[r] * (gh - mean_gh - h * mean_ghx));
                    }
                }
                vec![(*x, gx), (*gain, ggain), (*bias, gbias)]
            }
            Op::Concat { parts, axis } => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    let piece = if *axis == 0 {
                        let t = g.slice_rows(offset, pr);
                        offset += pr;
                        t
                    } else {
                        let mut data = Vec::with_capacity(pr * pc);
                        for r in 0..pr {
                            data.extend_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        offset += pc;
                        Tensor::new(pr, pc, data).expect("concat grad")
                    };
                    out.push((p, piece));
                }
                out
            }
            Op::SliceRows { x, start } => {
                let (xr, xc) = self.shape(*x);
                let mut gx = Tensor::zeros(xr, xc);
                gx.data_mut()[start * xc..start * xc + g.len()].copy_from_slice(g.data());
                vec![(*x, gx)]
            }
            Op::SliceCols { x, start } => {
                let (xr, xc) = self.shape(*x);
                let mut gx = Tensor::zeros(xr, xc);
                let w = g.cols();
                for r in 0..xr {
                    gx.data_mut()[r * xc + start..r * xc + start + w].copy_from_slice(g.row(r));
                }
                vec![(*x, gx)]
            }
            Op::Sum { x } => {
                let (xr, xc) = self.shape(*x);
                let gs = g.shape();
                let mut gx = Tensor::zeros(xr, xc);
                for r in 0..xr {
                    for c in 0..xc {
                        gx.set(r, c, g.data()[bidx(r, c, gs)]);
                    }
                }
                vec![(*x, gx)]
            }
            Op::MulConst { x, c } => vec![(*x, broadcast_zip(g, c, |a, b| a * b))],
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("elementwise shape")
}
