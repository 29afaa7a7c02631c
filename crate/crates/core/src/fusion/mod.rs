//! Modality fusion, temporal fusion, the prediction head and the assembled
//! network.

pub mod head;
pub mod maf;
pub mod network;
pub mod taf;

pub use head::{predict_head, Dropout};
pub use maf::{fuse_modalities, modality_scores, modality_weights, MafMode};
pub use network::{pmfnet_forward, Diagnostics, ForwardMode, ModelConfig, Toggles, Variant};
pub use taf::taf_forward;
