//! Dataset manifests, feature and embedding files, synthetic data.

pub mod embedding;
pub mod features;
pub mod lexicon;
pub mod manifest;
pub mod synth;

pub use embedding::EmbeddingTable;
pub use features::{
    decode_features, encode_features, load_features, read_features, resample_units,
    write_features,
};
pub use lexicon::{lexicon_tag, Lexicon};
pub use manifest::{load_manifest, parse_manifest, write_manifest, DatasetRecord};
pub use synth::{pair_pattern, synthesize, SynthOptions, SyntheticDataset};
