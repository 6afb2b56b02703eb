//! Projects fused embeddings of both modalities to 2-D with PCA, before and
//! after a short training run, and writes the trained projection as CSV.
//!
//! Usage: `cargo run --release --example embedding_projection [out.csv]`

use landmark_match::data_io::{generate_synthetic, SynthConfig};
use landmark_match::eval::{evaluate, pca_project, write_projection_csv, GalleryMode};
use landmark_match::graph::{GraphConfig, PatchConfig};
use landmark_match::model::{fused_embedding, prepare_pairs, FeatureStore, Model, ModelConfig, PairedSamples};
use landmark_match::training::{train, TripletConfig};
use ndarray::Array2;

fn embeddings(model: &Model, pairs: &PairedSamples) -> Array2<f64> {
    let samples: Vec<_> = pairs.skull.iter().chain(&pairs.face).collect();
    let mut out = Array2::zeros((samples.len(), model.config.token_dim()));
    for (mut row, s) in out.rows_mut().into_iter().zip(samples) {
        row.assign(&fused_embedding(model, s));
    }
    out
}

/// Mean distance between each skull point and its paired face point.
fn pair_spread(coords: &Array2<f64>, n: usize) -> f64 {
    (0..n)
        .map(|i| {
            let d = &coords.row(i) - &coords.row(i + n);
            d.dot(&d).sqrt()
        })
        .sum::<f64>()
        / n as f64
}

fn main() -> landmark_match::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "projection.csv".into());
    let ds = generate_synthetic(&SynthConfig {
        n_identities: 12,
        n_landmarks: 10,
        d_feat: 8,
        d_g: 16,
        seed: 9,
        ..SynthConfig::default()
    })?;
    let gcfg = GraphConfig {
        patch: PatchConfig::new(16, 8)?,
        k: 3,
        normalize_coords: true,
    };
    let pairs = prepare_pairs(&ds.a, &ds.b, &gcfg, 16, &FeatureStore { memory: Some(&ds.features) })?;
    let n = pairs.len();
    let mcfg = ModelConfig {
        d_feat: 8,
        hidden: 32,
        d_embed: 16,
        d_g: 16,
        heads: 2,
        d_ff: 64,
        ..ModelConfig::default()
    };
    let cfg = TripletConfig {
        lr: 1e-3,
        epochs: 60,
        batch_size: 4,
        seed: 4,
        ..TripletConfig::default()
    };
    let model = Model::init(mcfg, cfg.seed)?;
    let score = cfg.score_config();
    let r1_before = evaluate(&model, &pairs, &score, GalleryMode::PerView, &[1])?.recall[0];
    let before = pca_project(&embeddings(&model, &pairs), 0)?;
    let trained = train(model, &pairs, None, &cfg, |_| {})?.last;
    let r1_after = evaluate(&trained, &pairs, &score, GalleryMode::PerView, &[1])?.recall[0];
    let after = pca_project(&embeddings(&trained, &pairs), 0)?;

    println!("R@1 before {r1_before:.3}, after {r1_after:.3}");

    println!("explained variance before {:.4?}, after {:.4?}", before.explained, after.explained);
    println!(
        "mean skull-face distance in the plane: before {:.3}, after {:.3}",
        pair_spread(&before.coords, n),
        pair_spread(&after.coords, n)
    );
    let labels: Vec<(String, String)> =
        pairs.skull.iter().chain(&pairs.face).map(|s| (s.id.clone(), s.modality.to_string())).collect();
    write_projection_csv(out.as_ref(), &labels, &after)?;
    println!("wrote {} rows to {out}", labels.len());
    Ok(())
}
