//! Retrieval metrics on a two-view synthetic set: per-view galleries,
//! one merged gallery, and a top-5 listing for a single query.

use landmark_match::data_io::{generate_synthetic, Split, SynthConfig, View};
use landmark_match::eval::{evaluate, retrieve_all, GalleryMode, MetricReport, DEFAULT_KS};
use landmark_match::graph::{GraphConfig, PatchConfig};
use landmark_match::model::{prepare_pairs, FeatureStore, Model, ModelConfig};
use landmark_match::training::{train, TripletConfig};

fn main() -> landmark_match::Result<()> {
    let ds = generate_synthetic(&SynthConfig {
        n_identities: 40,
        n_landmarks: 12,
        d_feat: 8,
        d_g: 16,
        seed: 21,
        views: vec![View::Front, View::Side],
        ..SynthConfig::default()
    })?;
    let gcfg = GraphConfig {
        patch: PatchConfig::new(16, 8)?,
        k: 3,
        normalize_coords: true,
    };
    let store = FeatureStore { memory: Some(&ds.features) };
    let parts = ds.split(&[(Split::Train, 30), (Split::Test, 10)])?;
    let train_p = prepare_pairs(&parts[0].0, &parts[0].1, &gcfg, 16, &store)?;
    let test_p = prepare_pairs(&parts[1].0, &parts[1].1, &gcfg, 16, &store)?;

    let cfg = TripletConfig {
        lr: 1e-3,
        epochs: 15,
        batch_size: 10,
        seed: 2,
        ..TripletConfig::default()
    };
    let model = Model::init(
        ModelConfig {
            d_feat: 8,
            hidden: 32,
            d_embed: 16,
            d_g: 16,
            heads: 4,
            d_ff: 64,
            ..ModelConfig::default()
        },
        cfg.seed,
    )?;
    let model = train(model, &train_p, None, &cfg, |_| {})?.last;
    let score = cfg.score_config();

    let per_view = evaluate(&model, &test_p, &score, GalleryMode::PerView, &DEFAULT_KS)?;
    println!("per-view galleries (10 faces each):\n{}", per_view.table());
    let merged = evaluate(&model, &test_p, &score, GalleryMode::Merged, &DEFAULT_KS)?;
    println!("merged gallery (20 faces):\n{}", merged.table());

    let (rankings, truth) = retrieve_all(&model, &test_p, &score, GalleryMode::PerView)?;
    let q = &rankings[0];
    println!("top 5 for query {} (true match {}):", q.query_id, truth[&q.query_id]);
    for (rank, (id, s)) in q.top(5).enumerate() {
        println!("  {}. {id}  {s:.4}", rank + 1);
    }
    let (merged_rankings, _) = retrieve_all(&model, &test_p, &score, GalleryMode::Merged)?;
    let m = &merged_rankings[0];
    println!("merged gallery for {}: {} entries, top 3:", m.query_id, m.gallery_ids.len());
    for (id, s) in m.top(3) {
        println!("  {id}  {s:.4}");
    }
    let again = MetricReport::compute(&rankings, &truth, &[1])?;
    println!("R@1 from the rankings: {:.3}", again.recall[0]);
    Ok(())
}
