//! Temporal attention fusion over the per-frame fused features.

use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{encoder_forward, EncoderConfig, EncoderOutput};
use crate::params::{Graph, ParamSpec};
use crate::tensor::Element;

pub const TAF_PREFIX: &str = "taf";

pub fn taf_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    cfg.specs(TAF_PREFIX)
}

/// Encode `F: [N, d]` with the pre-norm encoder under `taf.*`. Returns the
/// encoded sequence and one `[1, heads, N, N]` map per layer.
pub fn taf_forward<T: Element>(g: &mut Graph<T>, cfg: &EncoderConfig, x: Var) -> Result<EncoderOutput> {
    encoder_forward(g, cfg, TAF_PREFIX, x, 1)
}
