//! Encodes a synthetic skull/face pair with a randomly initialised model
//! and shows the token layout `[H_i ‖ f_global]`.

use landmark_match::data_io::{generate_synthetic, SynthConfig};
use landmark_match::gcn::{build_tokens, gcn_forward};
use landmark_match::graph::{GraphConfig, PatchConfig};
use landmark_match::model::{fused_embedding, global_scores, prepare_pairs, FeatureStore, Model, ModelConfig};

fn main() -> landmark_match::Result<()> {
    let ds = generate_synthetic(&SynthConfig {
        n_identities: 3,
        n_landmarks: 6,
        d_feat: 8,
        d_g: 8,
        seed: 3,
        ..SynthConfig::default()
    })?;
    let gcfg = GraphConfig {
        patch: PatchConfig::new(16, 8)?,
        k: 2,
        normalize_coords: true,
    };
    let pairs = prepare_pairs(&ds.a, &ds.b, &gcfg, 8, &FeatureStore { memory: Some(&ds.features) })?;
    let model = Model::init(
        ModelConfig {
            d_feat: 8,
            hidden: 16,
            d_embed: 8,
            d_g: 8,
            heads: 2,
            d_ff: 32,
            ..ModelConfig::default()
        },
        0,
    )?;
    println!("{} parameters", model.parameter_count());

    let s = &pairs.skull[0];
    println!("sample {} ({}, {}): {} nodes x {} inputs", s.id, s.modality, s.view, s.x.nrows(), s.x.ncols());
    let h = gcn_forward(&s.x, &s.adj, &model.gcn)?;
    let tokens = build_tokens(&h, &s.global);
    println!("node embeddings {:?}, tokens {:?}", h.dim(), tokens.tokens.dim());
    println!("first token:\n{:.3}", tokens.tokens.row(0));
    println!("fused embedding:\n{:.3}", fused_embedding(&model, s));

    let gallery: Vec<_> = pairs.face.iter().collect();
    println!("untrained global similarity to each face: {:.3?}", global_scores(&model, s, &gallery));
    Ok(())
}
