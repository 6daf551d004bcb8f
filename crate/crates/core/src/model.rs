//! Full model assembly: encoders, prototype extraction, selection, gated
//! backbone and auxiliary head, plus the ablation factory.

use crate::autodiff::{seeded_rng, ParamStore, Rng, Tape, Tensor, Var};
use crate::backbone::{Backbone, BackboneTrace, Gating};
use crate::config::{Config, Variant};
use crate::data::{Batch, Modality};
use crate::encoder::{Encoders, ModalityEncoder};
use crate::error::Result;
use crate::nn::Ctx;
use crate::objectives::{self, AuxHead, LossBreakdown};
use crate::prototype::{self, CrossAttention, PrototypeBank};
use crate::selection::{self, Scorer, Selection};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub variant: Variant,
    pub widths: [usize; 3],
    pub encoders: Encoders,
    /// One shared bank, or three modality-specific banks.
    pub banks: Vec<PrototypeBank>,
    pub cross: Option<[CrossAttention; 3]>,
    pub scorer: Option<Scorer>,
    pub backbone: Backbone,
    pub aux_head: AuxHead,
}

/// Everything one sample's forward pass leaves on the tape.
#[derive(Clone, Debug)]
pub struct SampleForward {
    /// Prototype matrix used for each modality, (t, a, v).
    pub prototypes: [Var; 3],
    pub responses: [Var; 3],
    pub selection: Selection,
    pub trace: BackboneTrace,
    /// `K x 1` auxiliary predictions.
    pub aux_preds: Var,
}

pub struct BatchForward {
    /// `B x 1`.
    pub preds: Var,
    pub samples: Vec<SampleForward>,
}

/// Builds the model for `config`'s variant with freshly initialised
/// parameters drawn from `config.seed`.
pub fn build_variant(config: &Config, widths: [usize; 3]) -> Result<(Model, ParamStore)> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed);
    Model::new(config, widths, &mut rng)
}

impl Model {
    pub fn new(config: &Config, widths: [usize; 3], rng: &mut Rng) -> Result<(Model, ParamStore)> {
        let variant = config.variant()?;
        let d = config.hidden_dim;
        let k = config.num_prototypes;
        let mut store = ParamStore::new();
        let encoders = Encoders::new(&mut store, config, widths, rng);
        let banks = if variant.shared_bank() {
            vec![PrototypeBank::new(&mut store, "prototypes", k, d, rng)]
        } else {
            Modality::ALL
                .iter()
                .map(|m| PrototypeBank::new(&mut store, &format!("prototypes.{}", m.name()), k, d, rng))
                .collect()
        };
        let cross = variant.uses_cross_attention().then(|| {
            Modality::ALL.map(|m| {
                CrossAttention::new(&mut store, &format!("cross.{}", m.name()), d, config.heads, config.ffn_dim(), rng)
            })
        });
        let scorer = variant.uses_scorer().then(|| Scorer::new(&mut store, "scorer", d, rng));
        let backbone = Backbone::new(&mut store, config, variant.fine_path(), variant.gated(), rng);
        let aux_head = if config.per_slot_aux {
            AuxHead::per_slot(&mut store, k, d, rng)
        } else {
            AuxHead::shared(&mut store, d, rng)
        };
        let model = Model {
            config: config.clone(),
            variant,
            widths,
            encoders,
            banks,
            cross,
            scorer,
            backbone,
            aux_head,
        };
        Ok((model, store))
    }

    /// Scalar parameter count predicted from the architecture alone.
    pub fn expected_num_params(config: &Config, widths: [usize; 3]) -> Result<usize> {
        let v = config.variant()?;
        let d = config.hidden_dim;
        let k = config.num_prototypes;
        let encoders: usize = widths.iter().map(|&w| ModalityEncoder::num_params(config, w)).sum();
        let banks = if v.shared_bank() { k * d } else { 3 * k * d };
        let cross = if v.uses_cross_attention() {
            3 * CrossAttention::num_params(d, config.ffn_dim())
        } else {
            0
        };
        let scorer = if v.uses_scorer() { Scorer::num_params(d) } else { 0 };
        Ok(encoders
            + banks
            + cross
            + scorer
            + Backbone::num_params(config, v.fine_path(), v.gated())
            + AuxHead::num_params(k, d, config.per_slot_aux))
    }

    pub fn default_gating(&self) -> Gating {
        if self.backbone.fine_path && self.backbone.is_gated() {
            Gating::Learned
        } else {
            Gating::Disabled
        }
    }

    fn bank_for(&self, m: Modality) -> &PrototypeBank {
        if self.banks.len() == 1 {
            &self.banks[0]
        } else {
            &self.banks[m.index()]
        }
    }

    /// Forward pass for one sample given padded features and masks.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        feats: [&Tensor; 3],
        masks: [&[bool]; 3],
        gating: &Gating,
        ctx: &mut Ctx,
    ) -> Result<SampleForward> {
        let k = self.config.num_prototypes;
        let mut prototypes = Vec::with_capacity(3);
        let mut responses = Vec::with_capacity(3);
        for m in Modality::ALL {
            let i = m.index();
            let seq = self.encoders.get(m).encode(tape, store, feats[i], masks[i], ctx)?;
            let bank = self.bank_for(m);
            let response = match &self.cross {
                Some(cross) => prototype::extract(tape, store, bank, &seq, &cross[i], ctx)?,
                None => prototype::mean_pool_fallback(tape, &seq, k)?,
            };
            prototypes.push(bank.var(tape, store));
            responses.push(response.response);
        }
        let prototypes: [Var; 3] = prototypes.try_into().expect("three modalities");
        let responses: [Var; 3] = responses.try_into().expect("three modalities");
        let selection = match &self.scorer {
            Some(scorer) => selection::select_and_fuse(tape, store, &responses, &prototypes, scorer)?,
            None => selection::uniform_fuse(tape, &responses)?,
        };
        let fine = self.backbone.fine_path.then_some(&responses);
        let tokens = self.backbone.assemble_tokens(tape, store, selection.fused, fine)?;
        let trace = self.backbone.forward(tape, store, tokens, gating, ctx)?;
        let aux_preds = self.aux_head.predict(tape, store, selection.fused)?;
        Ok(SampleForward {
            prototypes,
            responses,
            selection,
            trace,
            aux_preds,
        })
    }

    pub fn forward_batch(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, ctx: &mut Ctx) -> Result<BatchForward> {
        let gating = self.default_gating();
        let mut samples = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let feats = Modality::ALL.map(|m| &batch.modality(m).feats[i]);
            let masks = Modality::ALL.map(|m| batch.modality(m).masks[i].as_slice());
            samples.push(self.forward_sample(tape, store, feats, masks, &gating, ctx)?);
        }
        let preds: Vec<Var> = samples.iter().map(|s| s.trace.prediction).collect();
        let preds = tape.concat(&preds, 0)?;
        Ok(BatchForward { preds, samples })
    }

    /// Diversity loss over the bank(s); averaged when banks are per modality.
    pub fn diversity_loss(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let mut terms = Vec::with_capacity(self.banks.len());
        for bank in &self.banks {
            let m = bank.var(tape, store);
            terms.push(objectives::div_loss(tape, m)?);
        }
        let n = terms.len();
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(if n == 1 { acc } else { tape.scale(acc, 1.0 / n as f64) })
    }

    /// Forward plus the combined training objective for a batch.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        ctx: &mut Ctx,
    ) -> Result<(Var, LossBreakdown, BatchForward)> {
        let fwd = self.forward_batch(tape, store, batch, ctx)?;
        let reg = objectives::reg_loss(tape, fwd.preds, &batch.labels)?;
        let aux_preds: Vec<Var> = fwd.samples.iter().map(|s| s.aux_preds).collect();
        let aux = objectives::aux_loss(tape, &aux_preds, &batch.labels)?;
        let div = self.diversity_loss(tape, store)?;
        let (total, parts) = objectives::total_loss(
            tape,
            reg,
            aux,
            div,
            self.config.lambda_aux,
            self.config.lambda_div,
        )?;
        Ok((total, parts, fwd))
    }
}
