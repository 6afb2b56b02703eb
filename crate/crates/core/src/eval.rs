//! Gallery ranking, Recall@K / mAP@K and 2-D PCA projection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{score_against, Model, PairedSamples, Sample, ScoreConfig};

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct RankedRetrieval {
    pub query_id: String,
    /// Gallery ids, best first.
    pub gallery_ids: Vec<String>,
    /// Scores aligned with `gallery_ids`, non-increasing.
    pub scores: Vec<f64>,
}

impl RankedRetrieval {
    /// Sorts by descending score, ties by gallery id.
    pub fn from_scores(query_id: impl Into<String>, items: Vec<(String, f64)>) -> Self {
        let mut items = items;
        items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let (gallery_ids, scores) = items.into_iter().unzip();
        Self {
            query_id: query_id.into(),
            gallery_ids,
            scores,
        }
    }

    /// 1-based rank of `id`.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.gallery_ids.iter().position(|g| g == id).map(|p| p + 1)
    }

    pub fn top(&self, k: usize) -> impl Iterator<Item = (&str, f64)> {
        self.gallery_ids.iter().map(String::as_str).zip(self.scores.iter().copied()).take(k)
    }
}

/// Ranks gallery samples for one query by combined similarity.
pub fn score_gallery(model: &Model, query: &Sample, gallery: &[&Sample], score: &ScoreConfig) -> Result<RankedRetrieval> {
    if gallery.is_empty() {
        return Err(Error::invalid("empty gallery"));
    }
    let scores = score_against(model, query, gallery, score)?;
    let items = gallery.iter().zip(scores).map(|(g, s)| (g.id.clone(), s.combined)).collect();
    Ok(RankedRetrieval::from_scores(query.id.clone(), items))
}

fn ranks(rankings: &[RankedRetrieval], truth: &BTreeMap<String, String>) -> Result<Vec<Option<usize>>> {
    rankings
        .iter()
        .map(|r| {
            let rel = truth
                .get(&r.query_id)
                .ok_or_else(|| Error::UnknownId(format!("{} (no ground truth)", r.query_id)))?;
            Ok(r.rank_of(rel))
        })
        .collect()
}

/// Fraction of queries whose relevant item is within the top `k`.
pub fn recall_at_k(rankings: &[RankedRetrieval], truth: &BTreeMap<String, String>, k: usize) -> Result<f64> {
    let rs = ranks(rankings, truth)?;
    if rs.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    Ok(rs.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / rs.len() as f64)
}

/// Mean of `1 / rank` over queries, counting 0 beyond rank `k`.
pub fn map_at_k(rankings: &[RankedRetrieval], truth: &BTreeMap<String, String>, k: usize) -> Result<f64> {
    let rs = ranks(rankings, truth)?;
    if rs.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    let sum: f64 = rs
        .iter()
        .map(|r| match r {
            Some(r) if *r <= k => 1.0 / *r as f64,
            _ => 0.0,
        })
        .sum();
    Ok(sum / rs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub map: Vec<f64>,
    pub queries: usize,
}

impl MetricReport {
    pub fn compute(rankings: &[RankedRetrieval], truth: &BTreeMap<String, String>, ks: &[usize]) -> Result<Self> {
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::invalid("k list must be non-empty and positive"));
        }
        Ok(Self {
            ks: ks.to_vec(),
            recall: ks.iter().map(|&k| recall_at_k(rankings, truth, k)).collect::<Result<_>>()?,
            map: ks.iter().map(|&k| map_at_k(rankings, truth, k)).collect::<Result<_>>()?,
            queries: rankings.len(),
        })
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn map_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.map[i])
    }

    /// Two-line table in percent: `R@1 ... mAP@20` header, then values.
    pub fn table(&self) -> String {
        let mut head = String::new();
        let mut vals = String::new();
        let cols = self
            .ks
            .iter()
            .zip(&self.recall)
            .map(|(k, v)| (format!("R@{k}"), *v))
            .chain(self.ks.iter().zip(&self.map).map(|(k, v)| (format!("mAP@{k}"), *v)));
        for (name, v) in cols {
            let _ = write!(head, "{name:>8}");
            let _ = write!(vals, "{:>8.1}", 100.0 * v);
        }
        format!("{head}\n{vals}\n({} queries)\n", self.queries)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GalleryMode {
    /// Each query is ranked against faces of its own view.
    #[default]
    PerView,
    /// One gallery across all views; ids are suffixed with the view.
    Merged,
}

fn key(s: &Sample, mode: GalleryMode) -> String {
    match mode {
        GalleryMode::PerView => s.id.clone(),
        GalleryMode::Merged => format!("{}/{}", s.id, s.view),
    }
}

/// Rankings for every skull-side query plus the matching ground truth.
pub fn retrieve_all(
    model: &Model,
    pairs: &PairedSamples,
    score: &ScoreConfig,
    mode: GalleryMode,
) -> Result<(Vec<RankedRetrieval>, BTreeMap<String, String>)> {
    let galleries: Vec<Vec<usize>> = match mode {
        GalleryMode::PerView => pairs.by_view().into_values().collect(),
        GalleryMode::Merged => vec![(0..pairs.len()).collect()],
    };
    let mut jobs = Vec::new();
    for g in &galleries {
        for &q in g {
            jobs.push((q, g));
        }
    }
    let rankings: Vec<RankedRetrieval> = jobs
        .par_iter()
        .map(|&(q, g)| {
            let gallery: Vec<&Sample> = g.iter().map(|&j| &pairs.face[j]).collect();
            let scores = score_against(model, &pairs.skull[q], &gallery, score)?;
            let items = gallery.iter().zip(scores).map(|(s, sc)| (key(s, mode), sc.combined)).collect();
            Ok(RankedRetrieval::from_scores(key(&pairs.skull[q], mode), items))
        })
        .collect::<Result<_>>()?;
    let truth = pairs.skull.iter().map(|s| (key(s, mode), key(s, mode))).collect();
    Ok((rankings, truth))
}

pub fn evaluate(model: &Model, pairs: &PairedSamples, score: &ScoreConfig, mode: GalleryMode, ks: &[usize]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to evaluate"));
    }
    let (rankings, truth) = retrieve_all(model, pairs, score, mode)?;
    MetricReport::compute(&rankings, &truth, ks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Array2<f64>,
    /// Variance along each axis.
    pub explained: [f64; 2],
    /// Set when the input has no variance and all coordinates are zero.
    pub degenerate: bool,
}

fn top_eigvec(cov: &Array2<f64>, rng: &mut ChaCha8Rng) -> (Array1<f64>, f64) {
    let d = cov.nrows();
    let mut v: Array1<f64> = Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0));
    let n = v.dot(&v).sqrt();
    v /= n;
    let mut lambda = 0.0;
    for _ in 0..20_000 {
        let w = cov.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return (Array1::zeros(d), 0.0);
        }
        let next = w / norm;
        let delta = (&next - &v).mapv(f64::abs).sum().min((&next + &v).mapv(f64::abs).sum());
        v = next;
        lambda = v.dot(&cov.dot(&v));
        if delta < 1e-14 {
            break;
        }
    }
    (v, lambda)
}

/// Mean-centred projection onto the top two principal axes, by power
/// iteration with deflation. Each axis is signed so its first nonzero
/// loading is positive.
pub fn pca_project(embeddings: &Array2<f64>, seed: u64) -> Result<Projection> {
    let (m, d) = embeddings.dim();
    if m < 2 {
        return Err(Error::invalid(format!("projection needs at least 2 points, got {m}")));
    }
    let mean = embeddings.mean_axis(Axis(0)).expect("m >= 2");
    let centred = embeddings - &mean;
    let scale = centred.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        log::warn!("projection input has no variance");
        return Ok(Projection {
            coords: Array2::zeros((m, 2)),
            explained: [0.0, 0.0],
            degenerate: true,
        });
    }
    let mut cov = centred.t().dot(&centred) / (m as f64 - 1.0);
    let tiny = 1e-12 * cov.diag().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Array2::zeros((m, 2));
    let mut explained = [0.0; 2];
    for axis in 0..2.min(d) {
        let (mut v, lambda) = top_eigvec(&cov, &mut rng);
        if lambda <= tiny {
            break;
        }
        if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                v.mapv_inplace(|x| -x);
            }
        }
        coords.column_mut(axis).assign(&centred.dot(&v));
        explained[axis] = lambda;
        let outer = v.view().insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
        cov = cov - outer * lambda;
    }
    Ok(Projection {
        coords,
        explained,
        degenerate: false,
    })
}

/// Writes `id,modality,x,y` rows.
pub fn write_projection_csv(path: &Path, labels: &[(String, String)], proj: &Projection) -> Result<()> {
    if labels.len() != proj.coords.nrows() {
        return Err(Error::shape("labels and coordinates differ in length"));
    }
    let mut out = String::from("id,modality,x,y\n");
    for ((id, modality), row) in labels.iter().zip(proj.coords.rows()) {
        let _ = writeln!(out, "{id},{modality},{},{}", row[0], row[1]);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn ranking(q: &str, order: &[&str]) -> RankedRetrieval {
        let n = order.len();
        RankedRetrieval::from_scores(q, order.iter().enumerate().map(|(i, g)| (g.to_string(), (n - i) as f64)).collect())
    }

    fn truth(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn ties_break_by_gallery_id() {
        let r = RankedRetrieval::from_scores("q", vec![("b".into(), 0.5), ("a".into(), 0.5), ("c".into(), 0.9)]);
        assert_eq!(r.gallery_ids, ["c", "a", "b"]);
        assert_eq!(r.rank_of("b"), Some(3));
    }

    #[test]
    fn recall_examples() {
        let all_first = vec![ranking("q1", &["q1", "x"]), ranking("q2", &["q2", "x"])];
        let t = truth(&[("q1", "q1"), ("q2", "q2")]);
        assert_eq!(recall_at_k(&all_first, &t, 1).unwrap(), 1.0);
        let order2: Vec<&str> = vec!["a", "q1", "c", "d", "e", "f", "g", "h"];
        let order7: Vec<&str> = vec!["a", "b", "c", "d", "e", "f", "q2", "h"];
        let rs = vec![ranking("q1", &order2), ranking("q2", &order7)];
        assert_eq!(recall_at_k(&rs, &t, 5).unwrap(), 0.5);
        assert_eq!(recall_at_k(&rs, &t, 7).unwrap(), 1.0);
        assert!(recall_at_k(&rs, &truth(&[("q1", "q1")]), 5).is_err());
    }

    #[test]
    fn map_examples() {
        let t = truth(&[("q", "r")]);
        assert_eq!(map_at_k(&[ranking("q", &["a", "r", "b"])], &t, 5).unwrap(), 0.5);
        let six = ["a", "b", "c", "d", "e", "r"];
        assert_eq!(map_at_k(&[ranking("q", &six)], &t, 5).unwrap(), 0.0);
    }

    #[test]
    fn report_table_columns() {
        let t = truth(&[("q", "q")]);
        let r = MetricReport::compute(&[ranking("q", &["q"])], &t, &DEFAULT_KS).unwrap();
        let table = r.table();
        let header = table.lines().next().unwrap();
        let cols: Vec<&str> = header.split_whitespace().collect();
        assert_eq!(cols, ["R@1", "R@5", "R@10", "R@20", "mAP@1", "mAP@5", "mAP@10", "mAP@20"]);
        assert_eq!(r.recall_at(20), Some(1.0));
        assert!(MetricReport::compute(&[ranking("q", &["q"])], &t, &[]).is_err());
    }

    #[test]
    fn pca_line_and_pair() {
        let line = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64) * [1.0, 2.0, -1.0][j] + 0.5);
        let p = pca_project(&line, 0).unwrap();
        assert!(p.coords.column(1).iter().all(|v| v.abs() < 1e-9));
        let v = array![3.0, 4.0];
        let pair = ndarray::stack![Axis(0), v, -&v];
        let p = pca_project(&pair, 0).unwrap();
        let mut c: Vec<f64> = p.coords.column(0).to_vec();
        c.sort_by(f64::total_cmp);
        assert!((c[0] + 5.0).abs() < 1e-9 && (c[1] - 5.0).abs() < 1e-9);
        let same = Array2::from_elem((4, 3), 2.0);
        let p = pca_project(&same, 0).unwrap();
        assert!(p.degenerate && p.coords.iter().all(|&v| v == 0.0));
        assert!(pca_project(&array![[1.0, 2.0]], 0).is_err());
    }

    #[test]
    fn pca_matches_dense_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Array2::from_shape_simple_fn((10, 5), || rand::Rng::random_range(&mut rng, -1.0..1.0));
        let p = pca_project(&x, 4).unwrap();
        let centred = &x - &x.mean_axis(Axis(0)).unwrap();
        let cov = centred.t().dot(&centred) / 9.0;
        let dense = nalgebra::DMatrix::from_fn(5, 5, |i, j| cov[[i, j]]);
        let eig = nalgebra::SymmetricEigen::new(dense);
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        assert!(p.explained[0] >= p.explained[1]);
        for axis in 0..2 {
            let e = order[axis];
            assert!((p.explained[axis] - eig.eigenvalues[e]).abs() < 1e-6);
            let mut v: Vec<f64> = (0..5).map(|i| eig.eigenvectors[(i, e)]).collect();
            if v.iter().find(|x| x.abs() > 1e-12).unwrap() < &0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            let v = Array1::from(v);
            let want = centred.dot(&v);
            for (a, b) in p.coords.column(axis).iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projection_csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let proj = pca_project(&array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]], 0).unwrap();
        let labels: Vec<(String, String)> = (0..3).map(|i| (format!("id{i}"), "A".to_string())).collect();
        write_projection_csv(&path, &labels, &proj).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "id,modality,x,y");
        assert_eq!(text.lines().count(), 4);
    }

    fn ranks_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 6), 1..8)
    }

    proptest! {
        #[test]
        fn metric_relations_hold(scores in ranks_strategy()) {
            let ids: Vec<String> = (0..6).map(|i| format!("g{i}")).collect();
            let rankings: Vec<RankedRetrieval> = scores.iter().enumerate().map(|(q, row)| {
                RankedRetrieval::from_scores(format!("g{}", q % 6), ids.iter().cloned().zip(row.iter().copied()).collect())
            }).collect();
            let t: BTreeMap<String, String> = ids.iter().map(|i| (i.clone(), i.clone())).collect();
            let r = MetricReport::compute(&rankings, &t, &[1, 2, 3, 5, 6]).unwrap();
            prop_assert_eq!(r.recall[0], r.map[0]);
            for w in r.recall.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            for (rc, mp) in r.recall.iter().zip(&r.map) {
                prop_assert!(mp <= rc);
                prop_assert!((0.0..=1.0).contains(rc));
            }
            // rank-based: a strictly increasing transform leaves metrics unchanged
            let warped: Vec<RankedRetrieval> = scores.iter().enumerate().map(|(q, row)| {
                RankedRetrieval::from_scores(format!("g{}", q % 6), ids.iter().cloned().zip(row.iter().map(|v| (2.0 * v).exp())).collect())
            }).collect();
            prop_assert_eq!(MetricReport::compute(&warped, &t, &[1, 2, 3, 5, 6]).unwrap(), r);
        }
    }
}
