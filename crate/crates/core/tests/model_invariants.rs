//! Structural properties of the assembled model.

mod common;

use proptest::prelude::*;
use protosent::autodiff::{ParamStore, Tape, Tensor, Var};
use protosent::backbone::{Backbone, Gating};
use protosent::data::{Batch, Modality, Sample};
use protosent::model::{build_variant, Model, SampleForward};
use protosent::nn::Ctx;
use protosent::{Config, Variant};

fn forward(model: &Model, store: &ParamStore, s: &Sample, gating: &Gating) -> (Tape, SampleForward) {
    let mut tape = Tape::new();
    let mut rng = common::rng(0);
    let mut ctx = Ctx::eval(&mut rng);
    let masks: Vec<Vec<bool>> = s.features.iter().map(|f| vec![true; f.rows()]).collect();
    let fwd = model
        .forward_sample(
            &mut tape,
            store,
            Modality::ALL.map(|m| s.feats(m)),
            [0, 1, 2].map(|i| masks[i].as_slice()),
            gating,
            &mut ctx,
        )
        .unwrap();
    (tape, fwd)
}

fn model_for(cfg: &Config) -> (Model, ParamStore) {
    build_variant(cfg, [5, 4, 3]).unwrap()
}

#[test]
fn backbone_length_is_one_plus_four_k() {
    let cfg = Config {
        num_prototypes: 8,
        ..common::tiny_config()
    };
    assert_eq!(Backbone::sequence_len(8, true), 33);
    let (model, store) = model_for(&cfg);
    let ds = common::tiny_dataset(0);
    let (tape, fwd) = forward(&model, &store, &ds.samples[0], &Gating::Learned);
    for x in &fwd.trace.layer_out {
        assert_eq!(tape.shape(*x), (33, 8));
    }
    let (model, store) = model_for(&cfg.with_variant(Variant::NoFinePath));
    let (tape, fwd) = forward(&model, &store, &ds.samples[0], &model.default_gating());
    assert_eq!(tape.shape(fwd.trace.layer_out[0]), (9, 8));
}

#[test]
fn ablation_structure() {
    let cfg = common::tiny_config();
    let (m, store) = model_for(&cfg.with_variant(Variant::NoDmrGates));
    assert!(m.backbone.layers.iter().all(|l| l.gate.is_none()));
    assert!(store.iter().all(|p| !p.name.contains(".gate.")));
    let (m, _) = model_for(&cfg.with_variant(Variant::NoSharedProto));
    assert_eq!(m.banks.len(), 3);
    let (m, _) = model_for(&cfg.with_variant(Variant::NoSpb));
    assert!(m.cross.is_none());
    let (m, _) = model_for(&cfg.with_variant(Variant::NoSelection));
    assert!(m.scorer.is_none());
    let both = Config {
        no_spb: true,
        no_selection: true,
        ..cfg
    };
    assert!(matches!(build_variant(&both, [5, 4, 3]), Err(protosent::Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn alpha_rows_sum_to_one_gates_open_and_fusion_is_convex(seed in 0u64..1000, data_seed in 0u64..1000) {
        let cfg = Config { seed, ..common::tiny_config() };
        let (model, store) = model_for(&cfg);
        let ds = common::tiny_dataset(data_seed);
        for s in ds.samples.iter().take(3) {
            let (tape, fwd) = forward(&model, &store, s, &Gating::Learned);
            let alpha = tape.value(fwd.selection.alpha);
            for k in 0..alpha.rows() {
                prop_assert!((alpha.row(k).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            prop_assert_eq!(fwd.trace.gates.len(), cfg.layers);
            for g in &fwd.trace.gates {
                prop_assert!(tape.value(*g).data().iter().all(|&x| x > 0.0 && x < 1.0));
            }
            let fused = tape.value(fwd.selection.fused);
            let zs: Vec<&Tensor> = fwd.responses.iter().map(|&z| tape.value(z)).collect();
            for k in 0..fused.rows() {
                for j in 0..fused.cols() {
                    let vals = [zs[0].get(k, j), zs[1].get(k, j), zs[2].get(k, j)];
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(fused.get(k, j) >= lo - 1e-12 && fused.get(k, j) <= hi + 1e-12);
                }
            }
        }
    }
}

#[test]
fn predictions_finite_for_a_hundred_seeds() {
    for seed in 0..100 {
        let cfg = Config { seed, ..common::tiny_config() };
        let (model, store) = model_for(&cfg);
        let ds = common::tiny_dataset(seed);
        let (tape, fwd) = forward(&model, &store, &ds.samples[0], &Gating::Learned);
        assert!(tape.value(fwd.trace.prediction).item().is_finite(), "seed {seed}");
    }
}

#[test]
fn cls_and_fused_rows_ignore_gate_values() {
    let cfg = common::tiny_config();
    let k = cfg.num_prototypes;
    let (model, store) = model_for(&cfg);
    let ds = common::tiny_dataset(4);
    let s = &ds.samples[1];
    let (ta, a) = forward(&model, &store, s, &Gating::Fixed(vec![[0.1, 0.5, 0.9], [0.3, 0.3, 0.3]]));
    let (tb, b) = forward(&model, &store, s, &Gating::Fixed(vec![[0.9, 0.2, 0.4], [0.7, 0.6, 0.1]]));
    // Inputs to the first gate are identical; only the modality groups may differ after it.
    let (xa, xb) = (ta.value(a.trace.layer_out[0]), tb.value(b.trace.layer_out[0]));
    assert_eq!(xa.slice_rows(0, 1 + k), xb.slice_rows(0, 1 + k));
    assert_ne!(xa.slice_rows(1 + k, k), xb.slice_rows(1 + k, k));
    // Gating leaves cls and fused rows exactly as the layer produced them.
    for (pre, post) in a.trace.pre_gate.iter().zip(&a.trace.layer_out) {
        assert_eq!(ta.value(*pre).slice_rows(0, 1 + k), ta.value(*post).slice_rows(0, 1 + k));
    }
    // Each modality group is scaled by its own gate entry.
    let pre = ta.value(a.trace.pre_gate[0]);
    for (m, g) in [0.1, 0.5, 0.9].iter().enumerate() {
        let start = 1 + k + m * k;
        let want = pre.slice_rows(start, k).map(|v| v * g);
        assert_eq!(xa.slice_rows(start, k), want);
    }
}

#[test]
fn unit_gates_equal_no_gating() {
    let cfg = common::tiny_config();
    let (model, store) = model_for(&cfg);
    let ds = common::tiny_dataset(5);
    for s in &ds.samples[..3] {
        let (ta, a) = forward(&model, &store, s, &Gating::Fixed(vec![[1.0; 3]; cfg.layers]));
        let (tb, b) = forward(&model, &store, s, &Gating::Disabled);
        assert_eq!(ta.value(a.trace.prediction), tb.value(b.trace.prediction));
    }
}

#[test]
fn permuting_prototypes_permutes_every_response() {
    let cfg = common::tiny_config();
    let (model, mut store) = model_for(&cfg);
    let ds = common::tiny_dataset(6);
    let s = &ds.samples[2];
    let (ta, a) = forward(&model, &store, s, &Gating::Learned);
    let perm = [2usize, 0, 1];
    let bank = model.banks[0].matrix;
    let m = store.value(bank).clone();
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| m.row(i).to_vec()).collect();
    *store.value_mut(bank) = Tensor::from_rows(&rows).unwrap();
    let (tb, b) = forward(&model, &store, s, &Gating::Learned);
    for mi in 0..3 {
        let za = ta.value(a.responses[mi]);
        let zb = tb.value(b.responses[mi]);
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..za.cols() {
                assert!((zb.get(new, j) - za.get(old, j)).abs() < 1e-12);
            }
        }
        let (aa, ab) = (ta.value(a.selection.alpha), tb.value(b.selection.alpha));
        for (new, &old) in perm.iter().enumerate() {
            assert!((ab.get(new, mi) - aa.get(old, mi)).abs() < 1e-12);
        }
    }
}

#[test]
fn padding_does_not_change_predictions() {
    let cfg = common::tiny_config();
    let (model, store) = model_for(&cfg);
    let ds = common::tiny_dataset(7);
    let all: Vec<&Sample> = ds.samples.iter().collect();
    let batched = {
        let mut tape = Tape::new();
        let mut rng = common::rng(0);
        let mut ctx = Ctx::eval(&mut rng);
        let f = model.forward_batch(&mut tape, &store, &Batch::from_samples(&all), &mut ctx).unwrap();
        tape.value(f.preds).data().to_vec()
    };
    for (i, s) in all.iter().enumerate() {
        let (tape, f) = forward(&model, &store, s, &Gating::Learned);
        assert!((tape.value(f.trace.prediction).item() - batched[i]).abs() < 1e-12);
    }
}

fn grad_on_bank(tape: &mut Tape, bank: Var, loss: Var) -> f64 {
    tape.backward(loss).unwrap();
    tape.grad(bank).map_or(0.0, |g| g.sum_squares().sqrt())
}

#[test]
fn prototype_bank_receives_gradient_through_three_paths() {
    let cfg = common::tiny_config();
    let (model, store) = model_for(&cfg);
    let ds = common::tiny_dataset(8);
    let s = &ds.samples[0];
    let bank = model.banks[0].matrix;

    // Full objective.
    let batch = Batch::from_samples(&[s]);
    let mut tape = Tape::new();
    let mut rng = common::rng(0);
    let mut ctx = Ctx::eval(&mut rng);
    let (loss, _, _) = model.loss(&mut tape, &store, &batch, &mut ctx).unwrap();
    let m = tape.param(&store, bank);
    assert!(grad_on_bank(&mut tape, m, loss) > 0.0);

    // Cross-attention path only: a loss on the responses, scorer unused.
    let (mut tape, f) = forward(&model, &store, s, &Gating::Learned);
    let sq = tape.square(f.responses[1]);
    let l = tape.sum(sq, None).unwrap();
    let m = tape.param(&store, bank);
    assert!(grad_on_bank(&mut tape, m, l) > 0.0);

    // Scorer path only: responses held constant.
    let mut tape = Tape::new();
    let m = tape.param(&store, bank);
    let z = [0, 1, 2].map(|i| tape.constant(common::rand_tensor(3, 8, &mut common::rng(i))));
    let scorer = model.scorer.as_ref().unwrap();
    let sel = protosent::selection::select_and_fuse(&mut tape, &store, &z, &[m, m, m], scorer).unwrap();
    let sq = tape.square(sel.fused);
    let l = tape.sum(sq, None).unwrap();
    assert!(grad_on_bank(&mut tape, m, l) > 0.0);

    // Diversity path only.
    let mut tape = Tape::new();
    let l = model.diversity_loss(&mut tape, &store).unwrap();
    let m = tape.param(&store, bank);
    assert!(grad_on_bank(&mut tape, m, l) > 0.0);
}
