//! Prototype-guided multimodal sentiment regression on a small CPU-only
//! autodiff core.

pub mod ablate;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod prototype;
pub mod selection;
pub mod trace;
pub mod train;

pub use config::{Config, Variant};
pub use error::{Error, Result};
pub use model::{build_variant, Model};
