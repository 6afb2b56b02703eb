//! Bidirectional cross-attention between skull and face tokens, with the
//! per-head attention maps of the skull-query direction.

use landmark_match::attention::{enhance, global_embed, multi_head_cross_attention_with_maps, Direction};
use landmark_match::model::{Model, ModelConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> landmark_match::Result<()> {
    let cfg = ModelConfig {
        d_feat: 4,
        hidden: 8,
        d_embed: 6,
        d_g: 2,
        heads: 2,
        d_ff: 16,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg, 11)?;
    let params = model.attention.as_ref().expect("cross-attention enabled");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = cfg.token_dim();
    let skull = Array2::from_shape_simple_fn((5, d), || rng.random_range(-1.0..1.0));
    let face = Array2::from_shape_simple_fn((4, d), || rng.random_range(-1.0..1.0));

    let (_, maps) = multi_head_cross_attention_with_maps(&skull, &face, params, Direction::SkullQuery)?;
    for (h, a) in maps.iter().enumerate() {
        println!("head {h}: skull queries x face keys\n{a:.3}");
    }

    let out = enhance(&skull, &face, params)?;
    let gs = global_embed(&out.skull)?;
    let gf = global_embed(&out.face)?;
    println!("enhanced skull tokens {:?}, face tokens {:?}", out.skull.dim(), out.face.dim());
    println!("global cosine after attention: {:.4}", gs.g.dot(&gf.g));
    Ok(())
}
