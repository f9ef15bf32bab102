//! Dual-attention guided dropblock (DGDM) for weakly supervised object
//! localization, together with a small CNN pipeline to train and evaluate it.

pub mod attention;
pub mod cagd;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod layer;
pub mod nn;
pub mod sagd;
pub mod tensor;
pub mod viz;

pub use error::{DgdmError, Result};
pub use tensor::FeatureMap;
