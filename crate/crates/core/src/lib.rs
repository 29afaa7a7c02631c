//! Pedestrian crossing-intention prediction from multimodal observation
//! windows: a small ViT per visual modality, a motion encoder, depth-guided
//! attention, modality and temporal attention fusion, and a reverse-mode
//! autodiff core to train it all.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dga;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod mfe;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod vfe;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
