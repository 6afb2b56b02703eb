//! Dataset manifests, CFV1 feature files, checkpoints and the synthetic
//! paired-modality generator.

mod cfv1;
mod checkpoint;
mod manifest;
mod synth;

pub use cfv1::{decode_feature_matrix, encode_feature_matrix, load_feature_file, write_feature_file, FeatureMatrix};
pub use checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint, NamedTensor, CHECKPOINT_VERSION};
pub use manifest::{
    check_paired, load_manifest, parse_manifest, write_manifest, DatasetManifest, Landmark, Modality, SampleRecord,
    Split, View,
};
pub use synth::{generate_synthetic, SynthConfig, SyntheticDataset};
