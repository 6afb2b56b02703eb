//! Landmark graphs: patch extraction, node features and kNN edges.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data_io::{decode_feature_matrix, encode_feature_matrix, FeatureMatrix, Landmark};
use crate::error::{Error, Result};

/// Side length of the pooled grid the toy extractors work on.
pub const POOL_GRID: usize = 8;
const PATCH_PROJECTION_SEED: u64 = 0x5eed_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    /// Half-size `P`; patches span `2P` pixels per side.
    pub half_size: usize,
    pub d_feat: usize,
}

impl PatchConfig {
    pub fn new(half_size: usize, d_feat: usize) -> Result<Self> {
        if half_size == 0 || d_feat == 0 {
            return Err(Error::invalid("patch half-size and d_feat must be positive"));
        }
        Ok(Self { half_size, d_feat })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphConfig {
    pub patch: PatchConfig,
    pub k: usize,
    /// Divide coordinates by image width / height before they enter node features.
    pub normalize_coords: bool,
}

/// Node feature matrix `X` (`N × (2 + d_feat)`) and directed kNN edges.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkGraph {
    pub x: Array2<f64>,
    pub edges: Vec<(usize, usize)>,
    pub k: usize,
}

impl LandmarkGraph {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d_feat(&self) -> usize {
        self.x.ncols() - 2
    }
}

/// Where node features come from.
pub enum NodeSource<'a> {
    /// Grayscale image (`H × W`), patches go through [`toy_patch_features`].
    Image(&'a Array2<f64>),
    /// Precomputed `N × d_feat` features.
    Features(&'a Array2<f64>),
}

/// Loads an image as grayscale in `[0, 1]`, `H × W`.
pub fn load_gray_image(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let img = image::open(path.as_ref())?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0] as f64 / 255.0
    }))
}

/// `I[y-P : y+P, x-P : x+P]` around the rounded landmark position, with
/// zero padding outside the image.
pub fn extract_patch(image: &Array2<f64>, landmark: &Landmark, half_size: usize) -> Result<Array2<f64>> {
    if !landmark.visible {
        return Err(Error::invalid("extract_patch called on an invisible landmark"));
    }
    if half_size == 0 {
        return Err(Error::invalid("patch half-size must be positive"));
    }
    let (h, w) = image.dim();
    let p = half_size as i64;
    let cx = landmark.x.round() as i64;
    let cy = landmark.y.round() as i64;
    let side = 2 * half_size;
    let mut patch = Array2::zeros((side, side));
    for r in 0..side {
        let y = cy - p + r as i64;
        if y < 0 || y >= h as i64 {
            continue;
        }
        for c in 0..side {
            let x = cx - p + c as i64;
            if x >= 0 && x < w as i64 {
                patch[[r, c]] = image[[y as usize, x as usize]];
            }
        }
    }
    Ok(patch)
}

/// Area-average resampling of `m` onto a `grid × grid` lattice.
pub fn area_pool(m: &Array2<f64>, grid: usize) -> Array2<f64> {
    let (h, w) = m.dim();
    let mut out = Array2::zeros((grid, grid));
    if h == 0 || w == 0 {
        return out;
    }
    let weights = |len: usize| -> Vec<Vec<(usize, f64)>> {
        // overlap of output cell j, spanning [j*len/grid, (j+1)*len/grid), with each input pixel
        (0..grid)
            .map(|j| {
                let lo = j as f64 * len as f64 / grid as f64;
                let hi = (j + 1) as f64 * len as f64 / grid as f64;
                let mut cells = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < len {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        cells.push((i, overlap / (hi - lo)));
                    }
                    i += 1;
                }
                cells
            })
            .collect()
    };
    let wr = weights(h);
    let wc = weights(w);
    for (gr, rows) in wr.iter().enumerate() {
        for (gc, cols) in wc.iter().enumerate() {
            let mut acc = 0.0;
            for &(r, a) in rows {
                for &(c, b) in cols {
                    acc += a * b * m[[r, c]];
                }
            }
            out[[gr, gc]] = acc;
        }
    }
    out
}

/// Fixed Gaussian projection `out_dim × in_dim`, scaled by `1/sqrt(in_dim)`.
pub(crate) fn seeded_projection(seed: u64, out_dim: usize, in_dim: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((out_dim as u64) << 32) ^ in_dim as u64);
    let scale = 1.0 / (in_dim as f64).sqrt();
    Array2::from_shape_simple_fn((out_dim, in_dim), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

/// L2 normalisation; the zero vector maps to itself.
pub fn l2_normalize(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

pub(crate) fn pooled_projection(m: &Array2<f64>, out_dim: usize, seed: u64) -> Array1<f64> {
    let pooled = area_pool(m, POOL_GRID);
    let flat = Array1::from_iter(pooled.iter().copied());
    let proj = seeded_projection(seed, out_dim, flat.len());
    l2_normalize(proj.dot(&flat))
}

/// Deterministic stand-in for a pretrained patch encoder: area-pool to an
/// 8×8 grid, project to `d_feat` with a fixed seeded matrix, L2-normalise.
pub fn toy_patch_features(patch: &Array2<f64>, d_feat: usize) -> Result<Array1<f64>> {
    if patch.is_empty() {
        return Err(Error::invalid("empty patch"));
    }
    Ok(pooled_projection(patch, d_feat, PATCH_PROJECTION_SEED))
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Directed edges from every node to its `k` nearest neighbours (Euclidean,
/// self excluded, ties to the lower index). Edges of node `i` are listed
/// nearest first.
pub fn knn_edges(points: &[[f64; 2]], k: usize) -> Result<Vec<(usize, usize)>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid(format!("kNN graph needs at least 2 points, got {n}")));
    }
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k must be in [1, {}], got {k}", n - 1)));
    }
    let mut edges = Vec::with_capacity(n * k);
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    for (i, p) in points.iter().enumerate() {
        heap.clear();
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
            let cand = Candidate {
                dist2: dx * dx + dy * dy,
                index: j,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().unwrap() {
                heap.pop();
                heap.push(cand);
            }
        }
        let mut nearest = heap.drain().collect::<Vec<_>>();
        nearest.sort();
        edges.extend(nearest.into_iter().map(|c| (i, c.index)));
    }
    Ok(edges)
}

/// Builds `G = (X, E)`: node `i` carries `[x_i, y_i, f_i]`, `f_i = 0` for
/// invisible landmarks, and edges connect annotated positions of all nodes.
pub fn build_graph(
    landmarks: &[Landmark],
    source: NodeSource<'_>,
    image_size: Option<(u32, u32)>,
    cfg: &GraphConfig,
) -> Result<LandmarkGraph> {
    let n = landmarks.len();
    if n < 2 {
        return Err(Error::invalid(format!("graph needs at least 2 landmarks, got {n}")));
    }
    let d_feat = cfg.patch.d_feat;
    let feats: Array2<f64> = match source {
        NodeSource::Features(f) => {
            if f.nrows() != n {
                return Err(Error::shape(format!("feature rows {} != landmark count {n}", f.nrows())));
            }
            if f.ncols() != d_feat {
                return Err(Error::shape(format!("feature dim {} != d_feat {d_feat}", f.ncols())));
            }
            f.clone()
        }
        NodeSource::Image(img) => {
            let mut out = Array2::zeros((n, d_feat));
            for (i, lm) in landmarks.iter().enumerate() {
                if lm.visible {
                    let patch = extract_patch(img, lm, cfg.patch.half_size)?;
                    out.row_mut(i).assign(&toy_patch_features(&patch, d_feat)?);
                }
            }
            out
        }
    };
    let (sx, sy) = if cfg.normalize_coords {
        let (w, h) = image_size.ok_or_else(|| {
            Error::invalid("coordinate normalisation needs the image size (width/height)")
        })?;
        (1.0 / w as f64, 1.0 / h as f64)
    } else {
        (1.0, 1.0)
    };

    let mut x = Array2::zeros((n, 2 + d_feat));
    for (i, lm) in landmarks.iter().enumerate() {
        x[[i, 0]] = lm.x * sx;
        x[[i, 1]] = lm.y * sy;
        if lm.visible {
            x.slice_mut(s![i, 2..]).assign(&feats.row(i));
        }
    }
    let points: Vec<[f64; 2]> = landmarks.iter().map(|l| [l.x, l.y]).collect();
    let edges = knn_edges(&points, cfg.k)?;
    Ok(LandmarkGraph { x, edges, k: cfg.k })
}

const EDGE_MAGIC: &[u8; 4] = b"EDG1";

/// Graph cache encoding: CFV1 block for `X`, then `"EDG1"`, `u32` k,
/// `u32` edge count and `u32` pairs, little-endian.
pub fn encode_graph(g: &LandmarkGraph) -> Result<Vec<u8>> {
    let mut out = encode_feature_matrix(&FeatureMatrix::from_array(&g.x)?);
    out.extend_from_slice(EDGE_MAGIC);
    out.extend_from_slice(&(g.k as u32).to_le_bytes());
    out.extend_from_slice(&(g.edges.len() as u32).to_le_bytes());
    for &(a, b) in &g.edges {
        out.extend_from_slice(&(a as u32).to_le_bytes());
        out.extend_from_slice(&(b as u32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_graph(bytes: &[u8]) -> Result<LandmarkGraph> {
    let (m, mut pos) = decode_feature_matrix(bytes)?;
    let rest = &bytes[pos..];
    if rest.len() < 12 || &rest[..4] != EDGE_MAGIC {
        return Err(Error::BadMagic { expected: "EDG1" });
    }
    let word = |b: &[u8], at: usize| u32::from_le_bytes(b[at..at + 4].try_into().unwrap()) as usize;
    let k = word(rest, 4);
    let count = word(rest, 8);
    pos = 12;
    if rest.len() != pos + 8 * count {
        return Err(Error::Truncated(format!("edge list of {count} pairs")));
    }
    let n = m.rows;
    let mut edges = Vec::with_capacity(count);
    for e in 0..count {
        let (a, b) = (word(rest, pos + 8 * e), word(rest, pos + 8 * e + 4));
        if a >= n || b >= n || a == b {
            return Err(Error::shape(format!("edge ({a}, {b}) invalid for {n} nodes")));
        }
        edges.push((a, b));
    }
    Ok(LandmarkGraph {
        x: m.to_array(),
        edges,
        k,
    })
}

pub fn write_graph_file(g: &LandmarkGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_graph(g)?).map_err(|e| Error::io(path, e))
}

pub fn read_graph_file(path: impl AsRef<Path>) -> Result<LandmarkGraph> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_graph(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
    }

    #[test]
    fn interior_patch_of_ones() {
        let img = Array2::ones((10, 10));
        let p = extract_patch(&img, &Landmark::visible(5.0, 5.0), 2).unwrap();
        assert_eq!(p, Array2::<f64>::ones((4, 4)));
    }

    #[test]
    fn corner_patch_is_zero_padded() {
        let img = Array2::ones((10, 10));
        let p = extract_patch(&img, &Landmark::visible(0.0, 0.0), 2).unwrap();
        assert_eq!(p.dim(), (4, 4));
        assert_eq!(p.slice(s![2.., 2..]), Array2::<f64>::ones((2, 2)));
        assert_eq!(p.slice(s![..2, ..]).sum(), 0.0);
        assert_eq!(p.slice(s![.., ..2]).sum(), 0.0);
    }

    #[test]
    fn constant_image_gives_constant_patch() {
        let img = Array2::from_elem((12, 9), 0.7);
        for (x, y) in [(4.0, 4.0), (2.0, 6.0), (6.0, 9.0)] {
            let p = extract_patch(&img, &Landmark::visible(x, y), 2).unwrap();
            assert!(p.iter().all(|&v| v == 0.7), "{p:?}");
        }
    }

    #[test]
    fn invisible_landmark_is_refused() {
        let img = Array2::ones((4, 4));
        assert!(extract_patch(&img, &Landmark::new(1.0, 1.0, false), 1).is_err());
    }

    #[test]
    fn toy_features_zero_and_determinism() {
        let z = toy_patch_features(&Array2::zeros((16, 16)), 8).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let patch = Array2::from_shape_fn((16, 16), |(r, c)| ((r * 3 + c) % 5) as f64);
        let a = toy_patch_features(&patch, 8).unwrap();
        let b = toy_patch_features(&patch, 8).unwrap();
        assert_eq!(a, b);
        assert!((a.dot(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkerboard_cosine_golden() {
        // 2x2-cell checkerboard on a 16x16 patch survives 8x8 pooling; its
        // complement is orthogonal as a raw vector.
        let board = Array2::from_shape_fn((16, 16), |(r, c)| (((r / 2) + (c / 2)) % 2) as f64);
        let inverse = board.mapv(|v| 1.0 - v);
        assert_eq!((&board * &inverse).sum(), 0.0);
        let a = toy_patch_features(&board, 32).unwrap();
        let b = toy_patch_features(&inverse, 32).unwrap();
        let cos = cosine(&a, &b);
        assert!((cos - CHECKERBOARD_COSINE).abs() < 1e-12, "cosine {cos}");
    }

    // Frozen output of the reference projection seed.
    const CHECKERBOARD_COSINE: f64 = 0.1301515423453862;

    #[test]
    fn area_pool_matches_block_mean_when_divisible() {
        let m = Array2::from_shape_fn((16, 16), |(r, c)| (r * 16 + c) as f64);
        let pooled = area_pool(&m, 8);
        let expect = (m[[0, 0]] + m[[0, 1]] + m[[1, 0]] + m[[1, 1]]) / 4.0;
        assert!((pooled[[0, 0]] - expect).abs() < 1e-12);
        // non-divisible sizes preserve the mean
        let odd = Array2::from_shape_fn((5, 7), |(r, c)| (r + 2 * c) as f64);
        let p = area_pool(&odd, 3);
        assert!((p.mean().unwrap() - odd.mean().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn collinear_knn() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
        let e = knn_edges(&pts, 1).unwrap();
        assert_eq!(e, vec![(0, 1), (1, 0), (2, 1)]);
    }

    #[test]
    fn complete_digraph_at_k_max() {
        let pts: Vec<[f64; 2]> = (0..6).map(|i| [i as f64 * 1.5, (i * i) as f64]).collect();
        let e = knn_edges(&pts, 5).unwrap();
        assert_eq!(e.len(), 30);
        assert!(e.iter().all(|(a, b)| a != b));
    }

    #[test]
    fn knn_tie_goes_to_lower_index() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]];
        let e = knn_edges(&pts, 2).unwrap();
        assert_eq!(&e[..2], &[(0, 1), (0, 2)]);
    }

    #[test]
    fn knn_rejects_bad_k() {
        let pts = [[0.0, 0.0], [1.0, 0.0]];
        assert!(knn_edges(&pts, 0).is_err());
        assert!(knn_edges(&pts, 2).is_err());
        assert!(knn_edges(&pts[..1], 1).is_err());
    }

    fn cfg(d_feat: usize, k: usize) -> GraphConfig {
        GraphConfig {
            patch: PatchConfig::new(2, d_feat).unwrap(),
            k,
            normalize_coords: false,
        }
    }

    #[test]
    fn supplied_features_shape() {
        let lms = [Landmark::visible(1.0, 1.0), Landmark::visible(2.0, 5.0), Landmark::visible(7.0, 3.0)];
        let f = Array2::from_elem((3, 4), 0.5);
        let g = build_graph(&lms, NodeSource::Features(&f), None, &cfg(4, 1)).unwrap();
        assert_eq!(g.x.dim(), (3, 6));
        assert_eq!(g.edges.len(), 3);
        assert_eq!(g.x.row(1).to_vec(), vec![2.0, 5.0, 0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn invisible_landmark_zero_features_kept_coords() {
        let lms = [Landmark::visible(1.0, 1.0), Landmark::new(4.0, 2.0, false), Landmark::visible(7.0, 3.0)];
        let f = Array2::from_elem((3, 2), 1.0);
        let g = build_graph(&lms, NodeSource::Features(&f), None, &cfg(2, 2)).unwrap();
        assert_eq!(g.x.row(1).to_vec(), vec![4.0, 2.0, 0.0, 0.0]);
        let img = Array2::ones((10, 10));
        let g = build_graph(&lms, NodeSource::Image(&img), None, &cfg(2, 2)).unwrap();
        assert_eq!(g.x.row(1).to_vec(), vec![4.0, 2.0, 0.0, 0.0]);
        assert!(g.x.row(0).iter().skip(2).any(|&v| v != 0.0));
    }

    #[test]
    fn full_front_view_shape() {
        let lms: Vec<Landmark> = (0..18).map(|i| Landmark::visible((i * 7 % 31) as f64, (i * 11 % 29) as f64)).collect();
        let f = Array2::zeros((18, 128));
        let g = build_graph(&lms, NodeSource::Features(&f), Some((64, 64)), &GraphConfig {
            normalize_coords: true,
            ..cfg(128, 4)
        })
        .unwrap();
        assert_eq!(g.x.dim(), (18, 130));
        assert_eq!(g.edges.len(), 72);
        assert!(g.x.column(0).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn build_graph_errors() {
        let lms = [Landmark::visible(1.0, 1.0), Landmark::visible(2.0, 5.0)];
        let f = Array2::zeros((3, 2));
        assert!(matches!(
            build_graph(&lms, NodeSource::Features(&f), None, &cfg(2, 1)),
            Err(Error::Shape(_))
        ));
        let f = Array2::zeros((2, 2));
        assert!(build_graph(&lms, NodeSource::Features(&f), None, &cfg(2, 2)).is_err());
        let norm = GraphConfig { normalize_coords: true, ..cfg(2, 1) };
        assert!(build_graph(&lms, NodeSource::Features(&f), None, &norm).is_err());
    }

    #[test]
    fn graph_cache_round_trip() {
        let lms = [Landmark::visible(1.0, 1.0), Landmark::visible(2.0, 5.0), Landmark::visible(7.0, 3.0)];
        let f = array![[0.25, 0.5], [1.0, -1.0], [0.0, 2.0]];
        let g = build_graph(&lms, NodeSource::Features(&f), None, &cfg(2, 2)).unwrap();
        let back = decode_graph(&encode_graph(&g).unwrap()).unwrap();
        assert_eq!(back, g);
        let bytes = encode_graph(&g).unwrap();
        assert!(decode_graph(&bytes[..bytes.len() - 2]).is_err());
    }
}
