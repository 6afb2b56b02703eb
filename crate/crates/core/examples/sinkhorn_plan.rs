//! Entropic transport between two small token sets under cosine cost.
//!
//! Usage: `cargo run --example sinkhorn_plan [plan.csv]`

use landmark_match::ot::{cosine_cost, ot_loss, ot_similarity, sinkhorn_uniform, SinkhornConfig};
use ndarray::{array, Axis};

fn main() -> landmark_match::Result<()> {
    // Three skull-side tokens and four face-side tokens; rows 0..2 of the
    // face set are noisy copies of the skull tokens.
    let skull = array![[1.0, 0.0, 0.2], [0.0, 1.0, 0.1], [0.3, 0.3, 1.0]];
    let face = array![[0.9, 0.1, 0.2], [0.1, 1.1, 0.0], [0.2, 0.4, 0.9], [-1.0, 0.2, 0.0]];
    let cost = cosine_cost(&skull, &face)?;
    println!("cost:\n{cost:.3}");

    for eps in [1.0, 0.1, 0.02] {
        let t = sinkhorn_uniform(&cost, &SinkhornConfig::new(eps, 80))?;
        println!("\neps = {eps}");
        println!("plan:\n{:.4}", t.plan);
        println!("row sums {:.5}", t.plan.sum_axis(Axis(1)));
        println!("marginal violation {:.2e}", t.marginal_violation());
        println!("<T, C> = {:.4}, similarity = {:.4}", ot_loss(&t.plan, &cost)?, ot_similarity(&t.plan, &cost)?);
        if let (Some(path), true) = (std::env::args().nth(1), eps == 0.1) {
            t.write_csv(path.as_ref())?;
            println!("wrote {path}");
        }
    }
    Ok(())
}
