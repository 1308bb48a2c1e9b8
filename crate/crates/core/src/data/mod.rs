//! Vocabulary, dataset files, and the synthetic glyph-grid generator.

pub mod dataset;
pub mod synth;
pub mod vocab;

pub use dataset::{load_dataset, save_dataset, split_dataset, write_json_lines, Sample, Splits};
pub use synth::{generate_synthetic, Placement, SyntheticSet, SyntheticSpec};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};
