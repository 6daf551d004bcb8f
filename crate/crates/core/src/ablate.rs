//! Runs the full model and every single-component ablation on one dataset.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::{Config, Variant};
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::eval::evaluate_split;
use crate::metrics::MetricReport;
use crate::train::{mse, Trainer};

/// Parameter-count change of `variant` relative to the full model, from the
/// architecture's closed form.
pub fn predicted_param_delta(config: &Config, variant: Variant) -> i64 {
    let d = config.hidden_dim as i64;
    let k = config.num_prototypes as i64;
    let l = config.layers as i64;
    let f = config.ffn_dim() as i64;
    let gates = l * (3 * d + 3);
    match variant {
        Variant::Full => 0,
        // Per modality: Q/K/V/O projections, FFN, two layer norms.
        Variant::NoSpb => -3 * (4 * (d * d + d) + (2 * d * f + f + d) + 4 * d),
        Variant::NoSelection => -(2 * d * d + d + d + 1),
        // Positional rows of the three fine-path groups plus every gate.
        Variant::NoFinePath => -(3 * k * d) - gates,
        Variant::NoDmrGates => -gates,
        Variant::NoSharedProto => 2 * k * d,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub params: usize,
    pub delta: i64,
    pub predicted_delta: i64,
    /// Eval-mode MSE on the training split after the last update.
    pub train_mse: f64,
    /// Test metrics of the best-by-validation state.
    pub test: MetricReport,
}

/// Trains each variant from the same seed and data.
pub fn run_ablation(config: &Config, dataset: &Dataset) -> Result<Vec<AblationRow>> {
    let base = config.with_variant(Variant::Full);
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    let mut full_params = None;
    for v in Variant::ALL {
        let cfg = base.with_variant(v);
        log::info!("training variant {}", v.label());
        let mut trainer = Trainer::new(&cfg, dataset)?;
        let params = trainer.store.num_scalars();
        let full = *full_params.get_or_insert(params);
        trainer.run_until(cfg.total_steps)?;
        let train_mse = mse(&trainer.model, &trainer.store, &dataset.split(Split::Train))?;
        let outcome = trainer.finish()?;
        let (model, store) = outcome.best.restore_model()?;
        let test = evaluate_split(&model, &store, dataset, Split::Test)?;
        rows.push(AblationRow {
            variant: v,
            label: v.label().to_string(),
            params,
            delta: params as i64 - full as i64,
            predicted_delta: predicted_param_delta(&cfg, v),
            train_mse,
            test,
        });
    }
    Ok(rows)
}

/// Table with one row per variant; binary metrics are shown as NN/NP.
pub fn format_table(rows: &[AblationRow]) -> String {
    let multi = rows.first().map_or("Acc-7", |r| r.test.multiclass.label());
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<18} {:>7} {:>7} {:>7} {:>13} {:>13} {:>9} {:>8} {:>9}",
        "Model", "MAE", "Corr", multi, "Acc-2", "F1", "Params", "Delta", "TrainMSE"
    );
    for r in rows {
        let t = &r.test;
        let _ = writeln!(
            s,
            "{:<18} {:>7.3} {:>7.3} {:>7.1} {:>13} {:>13} {:>9} {:>+8} {:>9.4}",
            r.label,
            t.mae,
            t.corr,
            100.0 * t.acc_multi,
            format!("{:.1}/{:.1}", 100.0 * t.acc2_nn, 100.0 * t.acc2_np),
            format!("{:.1}/{:.1}", 100.0 * t.f1_nn, 100.0 * t.f1_np),
            r.params,
            r.delta,
            r.train_mse
        );
    }
    s
}
