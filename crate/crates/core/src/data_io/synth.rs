//! Deterministic paired-modality data: a shared per-identity latent seen
//! through a fixed per-modality affine map plus independent noise.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::cfv1::{write_feature_file, FeatureMatrix};
use super::manifest::{write_manifest, DatasetManifest, Landmark, Modality, SampleRecord, Split, View};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub n_landmarks: usize,
    pub d_feat: usize,
    pub d_g: usize,
    pub seed: u64,
    /// Standard deviation of the independent per-modality noise.
    pub cross_modal_noise: f64,
    /// 0 gives identity modality maps; 1 gives a fully random linear map.
    pub modality_gap: f64,
    /// Per-identity landmark displacement, as a fraction of the image side.
    pub layout_spread: f64,
    pub image_size: u32,
    pub views: Vec<View>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 64,
            n_landmarks: 18,
            d_feat: 16,
            d_g: 64,
            seed: 0,
            cross_modal_noise: 0.05,
            modality_gap: 1.0,
            layout_spread: 0.03,
            image_size: 256,
            views: vec![View::Front],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub a: DatasetManifest,
    pub b: DatasetManifest,
    /// Feature matrices keyed by the relative reference used in the manifests.
    pub features: BTreeMap<String, FeatureMatrix>,
}

impl SyntheticDataset {
    pub fn feature(&self, reference: &str) -> Result<&FeatureMatrix> {
        self.features
            .get(reference)
            .ok_or_else(|| Error::invalid(format!("no synthetic feature {reference}")))
    }

    /// Writes `modality_a.jsonl`, `modality_b.jsonl` and the feature files
    /// under `dir`, returning the two manifest paths.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        for reference in self.features.keys() {
            if let Some(parent) = dir.join(reference).parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        for (reference, m) in &self.features {
            write_feature_file(m, dir.join(reference))?;
        }
        let pa = dir.join("modality_a.jsonl");
        let pb = dir.join("modality_b.jsonl");
        write_manifest(&self.a, &pa)?;
        write_manifest(&self.b, &pb)?;
        Ok((pa, pb))
    }

    /// Identity-disjoint consecutive splits, e.g. `[(Train, 64), (Test, 16)]`.
    pub fn split(&self, parts: &[(Split, usize)]) -> Result<Vec<(DatasetManifest, DatasetManifest)>> {
        let ids = self.a.ids();
        let total: usize = parts.iter().map(|p| p.1).sum();
        if total > ids.len() {
            return Err(Error::invalid(format!("splits need {total} identities, have {}", ids.len())));
        }
        let mut start = 0;
        parts
            .iter()
            .map(|&(split, n)| {
                let chosen = ids[start..start + n].iter().cloned().collect();
                start += n;
                Ok((self.a.subset(&chosen, split)?, self.b.subset(&chosen, split)?))
            })
            .collect()
    }
}

struct ModalityMap {
    feat: Array2<f64>,
    feat_bias: Array1<f64>,
    global: Array2<f64>,
    global_bias: Array1<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || StandardNormal.sample(rng))
}

fn modality_map(rng: &mut ChaCha8Rng, d_feat: usize, d_g: usize, gap: f64) -> ModalityMap {
    let mix = |rng: &mut ChaCha8Rng, d: usize| {
        let g = gaussian(rng, (d, d)) / (d as f64).sqrt();
        Array2::<f64>::eye(d) * (1.0 - gap) + g * gap
    };
    let feat = mix(rng, d_feat);
    let feat_bias = gaussian_vec(rng, d_feat) * (0.5 * gap);
    let global = mix(rng, d_g);
    let global_bias = gaussian_vec(rng, d_g) * (0.5 * gap);
    ModalityMap {
        feat,
        feat_bias,
        global,
        global_bias,
    }
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

fn observe(rng: &mut ChaCha8Rng, map: &Array2<f64>, bias: &Array1<f64>, latent: &Array1<f64>, noise: f64) -> Array1<f64> {
    let clean = unit(map.dot(latent) + bias);
    let eps = gaussian_vec(rng, clean.len());
    unit(clean + eps * noise)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    if cfg.n_identities < 2 || cfg.n_landmarks < 2 {
        return Err(Error::invalid("synthetic data needs at least 2 identities and 2 landmarks"));
    }
    if cfg.d_feat == 0 || cfg.d_g == 0 || cfg.image_size == 0 || cfg.views.is_empty() {
        return Err(Error::invalid("synthetic dims, image size and views must be non-empty"));
    }
    if !(cfg.cross_modal_noise >= 0.0) || !(0.0..=1.0).contains(&cfg.modality_gap) {
        return Err(Error::invalid("noise must be >= 0 and modality_gap in [0, 1]"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.image_size as f64;
    let (n, d_feat, d_g) = (cfg.n_landmarks, cfg.d_feat, cfg.d_g);

    let template: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let u: f64 = rand::Rng::random_range(&mut rng, 0.2..0.8);
            let v: f64 = rand::Rng::random_range(&mut rng, 0.2..0.8);
            (u, v)
        })
        .collect();
    let landmark_types = gaussian(&mut rng, (n, d_feat));
    let maps = [
        modality_map(&mut rng, d_feat, d_g, cfg.modality_gap),
        modality_map(&mut rng, d_feat, d_g, cfg.modality_gap),
    ];

    let mut records: [Vec<SampleRecord>; 2] = [Vec::new(), Vec::new()];
    let mut features = BTreeMap::new();
    for p in 0..cfg.n_identities {
        let id = format!("id{p:04}");
        for &view in &cfg.views {
            let jitter = gaussian(&mut rng, (n, 2)) * cfg.layout_spread;
            let latent = (&landmark_types + &gaussian(&mut rng, (n, d_feat))) / std::f64::consts::SQRT_2;
            let global_latent = gaussian_vec(&mut rng, d_g);

            for (mi, modality) in [Modality::A, Modality::B].into_iter().enumerate() {
                let map = &maps[mi];
                let coord_noise = gaussian(&mut rng, (n, 2)) * (0.1 * cfg.cross_modal_noise);
                let landmarks = (0..n)
                    .map(|i| {
                        let x = (template[i].0 + jitter[[i, 0]] + coord_noise[[i, 0]]).clamp(0.0, 1.0) * size;
                        let y = (template[i].1 + jitter[[i, 1]] + coord_noise[[i, 1]]).clamp(0.0, 1.0) * size;
                        Landmark::visible(x, y)
                    })
                    .collect();
                let mut patch = Array2::zeros((n, d_feat));
                for i in 0..n {
                    let row = observe(&mut rng, &map.feat, &map.feat_bias, &latent.row(i).to_owned(), cfg.cross_modal_noise);
                    patch.row_mut(i).assign(&row);
                }
                let global = observe(&mut rng, &map.global, &map.global_bias, &global_latent, cfg.cross_modal_noise);

                let stem = format!("{id}_{modality}_{view}");
                let patch_ref = format!("features/{stem}.cfv");
                let global_ref = format!("global/{stem}.cfv");
                features.insert(patch_ref.clone(), FeatureMatrix::from_array(&patch)?);
                features.insert(global_ref.clone(), FeatureMatrix::from_array(&global.insert_axis(ndarray::Axis(0)))?);
                records[mi].push(SampleRecord {
                    id: id.clone(),
                    modality,
                    view,
                    landmarks,
                    image_size: Some((cfg.image_size, cfg.image_size)),
                    image_ref: None,
                    patch_features_ref: Some(patch_ref),
                    global_feature_ref: Some(global_ref),
                });
            }
        }
    }
    let [ra, rb] = records;
    Ok(SyntheticDataset {
        a: DatasetManifest::new(ra, Split::Train, "")?,
        b: DatasetManifest::new(rb, Split::Train, "")?,
        features,
    })
}
