//! kNN landmark graphs: edges, tie handling and the normalised adjacency.

use landmark_match::data_io::Landmark;
use landmark_match::gcn::normalize_adjacency;
use landmark_match::graph::{build_graph, knn_edges, GraphConfig, NodeSource, PatchConfig};
use ndarray::Array2;

fn main() -> landmark_match::Result<()> {
    // A unit square plus its centre: every corner is equidistant from two
    // other corners, so ties go to the lower index.
    let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 0.5]];
    for k in 1..=3 {
        println!("k = {k}: {:?}", knn_edges(&pts, k)?);
    }

    let adj = normalize_adjacency(&knn_edges(&pts, 2)?, pts.len())?;
    println!("\nnormalised adjacency (k = 2):\n{adj:.3}");

    // A graph from landmarks with precomputed 3-d patch features. The third
    // landmark is not visible, so its features are zeroed.
    let landmarks = vec![
        Landmark::visible(40.0, 60.0),
        Landmark::visible(80.0, 62.0),
        Landmark::new(60.0, 90.0, false),
        Landmark::visible(60.0, 120.0),
    ];
    let feats = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 / 10.0);
    let cfg = GraphConfig {
        patch: PatchConfig::new(16, 3)?,
        k: 2,
        normalize_coords: true,
    };
    let g = build_graph(&landmarks, NodeSource::Features(&feats), Some((160, 160)), &cfg)?;
    println!("\nnode features [x, y, f]:\n{:.3}", g.x);
    println!("edges: {:?}", g.edges);
    Ok(())
}
