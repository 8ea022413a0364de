//! ViT front end: patchify and mask, an encoder over visible patches, and a
//! decoder whose learnable query tokens each predict one raw Gaussian.

mod layers;
mod mask;
mod model;
mod params;
mod patch;
mod posembed;

pub use mask::{sample_mask, visible_count, MaskSpec};
pub use model::{ForwardCache, GmaeModel, ModelConfig, QUERY_TOKENS};
pub use params::{ParamEntry, ParamId, ParameterStore, Tensor};
pub use patch::{patchify, unpatchify, PatchGrid};
pub use posembed::sincos_2d;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid mask: {0}")]
    Mask(String),
}

/// Visible tokens of `tokens` in `mask.visible` order.
pub fn gather_visible(tokens: &ndarray::Array2<f64>, mask: &MaskSpec) -> ndarray::Array2<f64> {
    tokens.select(ndarray::Axis(0), &mask.visible)
}
