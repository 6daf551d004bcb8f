//! Central finite-difference checks of the analytic gradients, for every
//! differentiable tape operation and for the end-to-end training loss.

use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{seeded_rng, ParamStore, Rng, Tape, Tensor, Var};
use crate::config::Config;
use crate::data::{generate_synthetic, Batch, SynthSpec};
use crate::error::Result;
use crate::model::{build_variant, Model};
use crate::nn::Ctx;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Scalars compared.
    pub checked: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rand_tensor(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Checks `build` by reducing its output against fixed random weights and
/// differentiating with respect to every element of every input.
pub fn check_fn(
    name: &str,
    inputs: &[Tensor],
    rng: &mut Rng,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckResult> {
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = build(&mut tape, &vars)?;
        let (r, c) = tape.shape(y);
        rand_tensor(r, c, -1.0, 1.0, rng)
    };
    let eval = |xs: &[Tensor], tape: &mut Tape| -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = build(tape, &vars)?;
        let yw = tape.mul_const(y, weights.clone())?;
        Ok((tape.sum(yw, None)?, vars))
    };
    let mut tape = Tape::new();
    let (loss, vars) = eval(inputs, &mut tape)?;
    tape.backward(loss)?;
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].rows(), inputs[i].cols()));
        for j in 0..inputs[i].len() {
            let mut xs = inputs.to_vec();
            let mut f = |delta: f64| -> Result<f64> {
                xs[i].data_mut()[j] = inputs[i].data()[j] + delta;
                let mut t = Tape::new();
                let (l, _) = eval(&xs, &mut t)?;
                Ok(t.value(l).item())
            };
            let numeric = (f(STEP)? - f(-STEP)?) / (2.0 * STEP);
            max_err = max_err.max(relative_error(analytic.data()[j], numeric));
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        checked,
        max_rel_err: max_err,
    })
}

/// One check per differentiable operation (and per broadcast form).
pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = seeded_rng(seed);
    let r = &mut rng;
    let a = rand_tensor(3, 4, -1.0, 1.0, r);
    let b = rand_tensor(3, 4, -1.0, 1.0, r);
    let sq = rand_tensor(4, 2, -1.0, 1.0, r);
    let pos = rand_tensor(3, 4, 0.5, 2.0, r);
    let row = rand_tensor(1, 4, -1.0, 1.0, r);
    let col = rand_tensor(3, 1, -1.0, 1.0, r);
    let one = rand_tensor(1, 1, 0.5, 1.5, r);
    // ReLU inputs kept away from the kink.
    let away: Tensor = a.map(|x| if x.abs() < 0.1 { x.signum() * 0.1 + x } else { x });
    let konst = rand_tensor(3, 4, -1.0, 1.0, r);
    let gain = rand_tensor(1, 4, 0.5, 1.5, r);

    let mut out = Vec::new();
    out.push(check_fn("matmul", &[a.clone(), sq.clone()], r, |t, v| t.matmul(v[0], v[1]))?);
    out.push(check_fn("matmul_bt", &[a.clone(), b.clone()], r, |t, v| t.matmul_bt(v[0], v[1]))?);
    out.push(check_fn("transpose", &[a.clone()], r, |t, v| Ok(t.transpose(v[0])))?);
    out.push(check_fn("add", &[a.clone(), b.clone()], r, |t, v| t.add(v[0], v[1]))?);
    out.push(check_fn("add_row_broadcast", &[a.clone(), row.clone()], r, |t, v| t.add(v[0], v[1]))?);
    out.push(check_fn("add_col_broadcast", &[a.clone(), col.clone()], r, |t, v| t.add(v[0], v[1]))?);
    out.push(check_fn("add_scalar_broadcast", &[a.clone(), one.clone()], r, |t, v| t.add(v[0], v[1]))?);
    out.push(check_fn("sub", &[a.clone(), row.clone()], r, |t, v| t.sub(v[0], v[1]))?);
    out.push(check_fn("mul", &[a.clone(), col.clone()], r, |t, v| t.mul(v[0], v[1]))?);
    out.push(check_fn("div", &[a.clone(), pos.clone()], r, |t, v| t.div(v[0], v[1]))?);
    out.push(check_fn("div_col_broadcast", &[a.clone(), col.map(|x| x.abs() + 0.5)], r, |t, v| {
        t.div(v[0], v[1])
    })?);
    out.push(check_fn("scale", &[a.clone()], r, |t, v| Ok(t.scale(v[0], -1.7)))?);
    out.push(check_fn("square", &[a.clone()], r, |t, v| Ok(t.square(v[0])))?);
    out.push(check_fn("sigmoid", &[a.clone()], r, |t, v| Ok(t.sigmoid(v[0])))?);
    out.push(check_fn("relu", &[away], r, |t, v| Ok(t.relu(v[0])))?);
    out.push(check_fn("sqrt", &[pos.clone()], r, |t, v| Ok(t.sqrt(v[0])))?);
    out.push(check_fn("softmax_rows", &[a.clone()], r, |t, v| t.softmax(v[0], 1))?);
    out.push(check_fn("softmax_cols", &[a.clone()], r, |t, v| t.softmax(v[0], 0))?);
    out.push(check_fn("masked_softmax_rows", &[a.clone()], r, |t, v| {
        t.masked_softmax_rows(v[0], &[true, false, true, true])
    })?);
    out.push(check_fn("layer_norm", &[a.clone(), gain, row.clone()], r, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    })?);
    out.push(check_fn("concat_rows", &[a.clone(), row.clone()], r, |t, v| t.concat(&[v[0], v[1]], 0))?);
    out.push(check_fn("concat_cols", &[a.clone(), col.clone()], r, |t, v| t.concat(&[v[0], v[1]], 1))?);
    out.push(check_fn("slice_rows", &[a.clone()], r, |t, v| t.slice_rows(v[0], 1, 2))?);
    out.push(check_fn("slice_cols", &[a.clone()], r, |t, v| t.slice_cols(v[0], 1, 2))?);
    out.push(check_fn("sum_all", &[a.clone()], r, |t, v| t.sum(v[0], None))?);
    out.push(check_fn("sum_rows", &[a.clone()], r, |t, v| t.sum(v[0], Some(0)))?);
    out.push(check_fn("sum_cols", &[a.clone()], r, |t, v| t.sum(v[0], Some(1)))?);
    out.push(check_fn("mean", &[a.clone()], r, |t, v| t.mean(v[0], Some(1)))?);
    out.push(check_fn("mul_const", &[a.clone()], r, move |t, v| t.mul_const(v[0], konst.clone()))?);
    out.push(check_fn("dropout", &[a.clone()], r, |t, v| {
        let mut drng = seeded_rng(99);
        t.dropout(v[0], 0.3, &mut drng, true)
    })?);
    out.push(check_fn("shared_operand", &[a], r, |t, v| {
        let s = t.mul(v[0], v[0])?;
        t.add(s, v[0])
    })?);
    Ok(out)
}

/// Model size used by the end-to-end check.
pub fn small_config() -> Config {
    Config {
        hidden_dim: 16,
        num_prototypes: 4,
        layers: 2,
        heads: 2,
        max_seq_len: 16,
        batch_size: 4,
        ..Config::default()
    }
}

fn model_loss(model: &Model, store: &ParamStore, batch: &Batch) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let mut rng = seeded_rng(0);
    let mut ctx = Ctx::eval(&mut rng);
    let (loss, _, _) = model.loss(&mut tape, store, batch, &mut ctx)?;
    Ok((tape, loss))
}

/// Checks the full training loss against `count` randomly sampled parameter
/// scalars (tensor first, then element, both uniform).
pub fn check_model(config: &Config, count: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let spec = SynthSpec {
        seed,
        n_train: config.batch_size,
        n_valid: 0,
        n_test: 0,
        lengths: [(2, 5); 3],
        widths: [5, 4, 3],
        ..SynthSpec::default()
    };
    let ds = generate_synthetic(&spec)?;
    let samples: Vec<_> = ds.samples.iter().collect();
    let batch = Batch::from_samples(&samples);
    let (model, mut store) = build_variant(config, spec.widths)?;

    let (mut tape, loss) = model_loss(&model, &store, &batch)?;
    tape.backward(loss)?;
    store.zero_grads();
    store.accumulate_grads(&tape);

    let mut rng = seeded_rng(seed ^ 0x5eed);
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..store.value(id).len());
        let analytic = store.grad(id).data()[j];
        let x0 = store.value(id).data()[j];
        let mut f = |x: f64| -> Result<f64> {
            store.value_mut(id).data_mut()[j] = x;
            let (tape, loss) = model_loss(&model, &store, &batch)?;
            Ok(tape.value(loss).item())
        };
        let numeric = (f(x0 + STEP)? - f(x0 - STEP)?) / (2.0 * STEP);
        store.value_mut(id).data_mut()[j] = x0;
        out.push(CheckResult {
            name: format!("loss wrt {}[{j}]", store.get(id).name),
            checked: 1,
            max_rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(out)
}

/// Operation suite plus the 20-parameter end-to-end check.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = check_ops(seed)?;
    all.extend(check_model(&small_config(), 20, seed)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // |x| at 0 has no derivative; relu-like kinks aside, a deliberately
        // mismatched pair of functions must fail.
        let mut rng = seeded_rng(0);
        let r = check_fn("relu_at_kink", &[Tensor::row_vector(&[0.0])], &mut rng, |t, v| Ok(t.relu(v[0]))).unwrap();
        assert!(!r.passed());
    }
}
