//! On-disk tensors, samples and the synthetic generator.

pub mod pmft;
pub mod sample;
pub mod synth;

pub use pmft::{read_pmft, read_pmft_any, write_pmft, AnyTensor};
pub use sample::{load_dataset, load_sample, write_dataset, write_sample, Sample};
pub use synth::{generate, generate_split, rule_oracle, synth_generate, Signal, Split, SynthConfig};
