//! Generates a synthetic paired dataset, writes manifests and CFV1 feature
//! files to disk, reloads them and round-trips a checkpoint.
//!
//! Usage: `cargo run --example synthetic_dataset [out_dir]`

use std::path::PathBuf;

use landmark_match::data_io::{
    check_paired, generate_synthetic, load_checkpoint, load_feature_file, load_manifest, save_checkpoint, SynthConfig,
    View,
};
use landmark_match::model::{Model, ModelConfig};

fn main() -> landmark_match::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("landmatch-synth"), PathBuf::from);
    let ds = generate_synthetic(&SynthConfig {
        n_identities: 8,
        views: vec![View::Front, View::Side],
        seed: 42,
        ..SynthConfig::default()
    })?;
    let (pa, pb) = ds.write_to(&out)?;
    println!("wrote {} and {}", pa.display(), pb.display());

    let a = load_manifest(&pa)?;
    let b = load_manifest(&pb)?;
    check_paired(&a, &b)?;
    println!("{} records per modality, ids {:?}", a.records.len(), &a.ids()[..3]);
    let r = &a.records[0];
    println!("first record: {} {} {}, {} landmarks", r.id, r.modality, r.view, r.landmarks.len());
    if let Some(f) = &r.patch_features_ref {
        let m = load_feature_file(a.resolve(f))?;
        println!("patch features {f}: {} x {}", m.rows, m.dim);
    }

    let model = Model::init(ModelConfig::default(), 0)?;
    let path = out.join("init.ckpt");
    save_checkpoint(&model.to_checkpoint(&Default::default()), &path)?;
    let back = Model::from_checkpoint(&load_checkpoint(&path)?)?;
    println!("checkpoint {} reloads with {} parameters", path.display(), back.parameter_count());
    Ok(())
}
