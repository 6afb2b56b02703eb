use landmark_match::data_io::{generate_synthetic, SynthConfig};
use landmark_match::eval::{evaluate, GalleryMode};
use landmark_match::graph::{GraphConfig, PatchConfig};
use landmark_match::model::{prepare_pairs, FeatureStore, Model, ModelConfig, PairedSamples};
use landmark_match::training::{train, TripletConfig};

fn synthetic_64() -> PairedSamples {
    let ds = generate_synthetic(&SynthConfig::default()).unwrap();
    let gcfg = GraphConfig {
        patch: PatchConfig::new(16, 16).unwrap(),
        k: 4,
        normalize_coords: true,
    };
    prepare_pairs(&ds.a, &ds.b, &gcfg, 64, &FeatureStore { memory: Some(&ds.features) }).unwrap()
}

fn model_config() -> ModelConfig {
    ModelConfig {
        d_feat: 16,
        hidden: 128,
        d_embed: 64,
        d_g: 64,
        heads: 4,
        d_ff: 512,
        ..ModelConfig::default()
    }
}

#[test]
fn untrained_models_rank_near_chance() {
    let pairs = synthetic_64();
    let score = TripletConfig::default().score_config();
    let r1: Vec<f64> = (0..4)
        .map(|seed| {
            let m = Model::init(model_config(), seed).unwrap();
            evaluate(&m, &pairs, &score, GalleryMode::PerView, &[1]).unwrap().recall[0]
        })
        .collect();
    let mean = r1.iter().sum::<f64>() / r1.len() as f64;
    // Chance is 1/64; four hits per 64 queries on average would be far above it.
    assert!(mean <= 4.0 / 64.0, "{r1:?}");
}

#[test]
fn default_training_loss_decreases_over_first_epochs() {
    let pairs = synthetic_64();
    let cfg = TripletConfig {
        epochs: 5,
        ..TripletConfig::default()
    };
    let out = train(Model::init(model_config(), 0).unwrap(), &pairs, None, &cfg, |_| {}).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|e| e.l_total).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}
