//! Model and training configuration.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters for one model and its training run.
///
/// Loaded from a flat TOML file; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Number of shared sentiment prototypes.
    pub num_prototypes: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    /// Backbone depth.
    pub layers: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub lambda_aux: f64,
    pub lambda_div: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// FFN hidden width as a multiple of `hidden_dim`.
    pub ffn_mult: usize,
    /// Longest modality sequence the encoders accept.
    pub max_seq_len: usize,
    pub encoder_pos_emb: bool,
    /// One auxiliary head per slot instead of a single shared head.
    pub per_slot_aux: bool,
    pub grad_clip: f64,

    pub no_spb: bool,
    pub no_selection: bool,
    pub no_fine_path: bool,
    pub no_dmr_gates: bool,
    pub no_shared_proto: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            num_prototypes: 8,
            hidden_dim: 128,
            heads: 8,
            layers: 2,
            batch_size: 64,
            dropout: 0.1,
            lambda_aux: 0.1,
            lambda_div: 0.001,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 200,
            total_steps: 2000,
            seed: 0,
            ffn_mult: 4,
            max_seq_len: 128,
            encoder_pos_emb: true,
            per_slot_aux: false,
            grad_clip: 1.0,
            no_spb: false,
            no_selection: false,
            no_fine_path: false,
            no_dmr_gates: false,
            no_shared_proto: false,
        }
    }
}

/// Which architecture is built: the full model or one single-component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSpb,
    NoSelection,
    NoFinePath,
    NoDmrGates,
    NoSharedProto,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoSpb,
        Variant::NoSelection,
        Variant::NoFinePath,
        Variant::NoDmrGates,
        Variant::NoSharedProto,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSpb => "w/o SPB",
            Variant::NoSelection => "w/o Selection",
            Variant::NoFinePath => "w/o Fine Path",
            Variant::NoDmrGates => "w/o DMR Gates",
            Variant::NoSharedProto => "w/o Shared Proto",
        }
    }

    pub fn shared_bank(self) -> bool {
        self != Variant::NoSharedProto
    }

    pub fn uses_cross_attention(self) -> bool {
        self != Variant::NoSpb
    }

    pub fn uses_scorer(self) -> bool {
        self != Variant::NoSelection
    }

    pub fn fine_path(self) -> bool {
        self != Variant::NoFinePath
    }

    /// Gates only exist when there are fine-path tokens to rescale.
    pub fn gated(self) -> bool {
        !matches!(self, Variant::NoDmrGates | Variant::NoFinePath)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden_dim * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_prototypes < 1 {
            return fail("num_prototypes must be at least 1".into());
        }
        if self.layers < 1 {
            return fail("layers must be at least 1".into());
        }
        if self.heads < 1 || self.hidden_dim % self.heads != 0 {
            return fail(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.hidden_dim < 2 {
            return fail("hidden_dim must be at least 2".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.lambda_aux < 0.0 || self.lambda_div < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if self.ffn_mult < 1 || self.max_seq_len < 1 {
            return fail("ffn_mult and max_seq_len must be at least 1".into());
        }
        if self.warmup_steps > self.total_steps {
            return fail("warmup_steps exceeds total_steps".into());
        }
        self.variant().map(|_| ())
    }

    /// Resolves the ablation flags; more than one set is an error.
    pub fn variant(&self) -> Result<Variant> {
        let flags = [
            (self.no_spb, Variant::NoSpb),
            (self.no_selection, Variant::NoSelection),
            (self.no_fine_path, Variant::NoFinePath),
            (self.no_dmr_gates, Variant::NoDmrGates),
            (self.no_shared_proto, Variant::NoSharedProto),
        ];
        let set: Vec<Variant> = flags.iter().filter(|(on, _)| *on).map(|&(_, v)| v).collect();
        match set.as_slice() {
            [] => Ok(Variant::Full),
            [v] => Ok(*v),
            many => Err(Error::Config(format!(
                "only one ablation may be enabled at a time, got {}",
                many.iter().map(|v| v.label()).collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    /// Copy of `self` with exactly the flag for `variant` set.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.no_spb = variant == Variant::NoSpb;
        c.no_selection = variant == Variant::NoSelection;
        c.no_fine_path = variant == Variant::NoFinePath;
        c.no_dmr_gates = variant == Variant::NoDmrGates;
        c.no_shared_proto = variant == Variant::NoSharedProto;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(c.num_prototypes, 8);
        assert_eq!(c.hidden_dim, 128);
        assert_eq!(c.heads, 8);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.dropout, 0.1);
        assert_eq!(c.lambda_aux, 0.1);
        assert_eq!(c.lambda_div, 0.001);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = Config::from_toml_str("hidden_dim = 32\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = Config::from_toml_str("hidden_dim = 32\nheads = 4\nno_spb = true\n").unwrap();
        assert_eq!(c.hidden_dim, 32);
        assert_eq!(c.layers, 2);
        assert_eq!(c.variant().unwrap(), Variant::NoSpb);
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(Config::from_toml_str("hidden_dim = 30\nheads = 4\n").is_err());
    }

    #[test]
    fn two_ablations_rejected() {
        let err = Config::from_toml_str("no_spb = true\nno_selection = true\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn toml_round_trip() {
        let c = Config {
            seed: 17,
            ..Config::default()
        }
        .with_variant(Variant::NoDmrGates);
        let back = Config::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }
}
