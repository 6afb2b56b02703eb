//! The full matching model: shared GCN encoder, optional bidirectional
//! cross-attention, global embeddings and optional OT alignment.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{enhance_var, global_embed_var, AttentionBank, AttentionParams, BankVars};
use crate::data_io::{
    check_paired, load_feature_file, DatasetManifest, FeatureMatrix, Modality, ModelCheckpoint, NamedTensor,
    SampleRecord, View,
};
use crate::error::{Error, Result};
use crate::gcn::{build_tokens_var, gcn_forward_var, normalize_adjacency, toy_global_feature, GcnParams, GlobalSource};
use crate::graph::{build_graph, load_gray_image, GraphConfig, LandmarkGraph, NodeSource};
use crate::ot::{cosine_cost_var, ot_loss_var, OtGradient, SinkhornConfig};
use crate::tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_feat: usize,
    pub hidden: usize,
    pub d_embed: usize,
    pub d_g: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub gcn_layers: usize,
    pub final_relu: bool,
    pub cross_attention: bool,
    pub use_ot: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_feat: 16,
            hidden: 128,
            d_embed: 128,
            d_g: 128,
            heads: 4,
            d_ff: 1024,
            gcn_layers: 2,
            final_relu: true,
            cross_attention: true,
            use_ot: true,
        }
    }
}

impl ModelConfig {
    pub fn token_dim(&self) -> usize {
        self.d_embed + self.d_g
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_feat == 0 || self.hidden == 0 || self.d_embed == 0 || self.gcn_layers == 0 {
            return Err(Error::invalid("model dimensions and GCN depth must be positive"));
        }
        if self.cross_attention {
            if self.heads == 0 || !self.token_dim().is_multiple_of(self.heads) {
                return Err(Error::invalid(format!(
                    "token dim {} not divisible by {} heads",
                    self.token_dim(),
                    self.heads
                )));
            }
            if self.d_ff == 0 {
                return Err(Error::invalid("d_ff must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        flat_map(self)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        from_flat_map(map)
    }
}

/// Serialises a flat struct to string key/value pairs.
pub(crate) fn flat_map<T: Serialize>(value: &T) -> BTreeMap<String, String> {
    let json = serde_json::to_value(value).expect("config serialises");
    json.as_object()
        .expect("config is a struct")
        .iter()
        .map(|(k, v)| {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            (k.clone(), s)
        })
        .collect()
}

/// Inverse of [`flat_map`]; unknown keys are ignored, missing keys default.
pub(crate) fn from_flat_map<T: for<'de> Deserialize<'de> + Serialize + Default>(
    map: &BTreeMap<String, String>,
) -> Result<T> {
    let template = serde_json::to_value(T::default()).expect("config serialises");
    let fields = template.as_object().expect("config is a struct");
    let mut obj = serde_json::Map::new();
    for (k, default) in fields {
        if let Some(s) = map.get(k) {
            let v = match default {
                serde_json::Value::String(_) => serde_json::Value::String(s.clone()),
                _ => serde_json::from_str(s).map_err(|e| Error::invalid(format!("config key {k}: {e}")))?,
            };
            obj.insert(k.clone(), v);
        }
    }
    serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| Error::invalid(format!("config: {e}")))
}

/// Learnable state. The GCN is shared by both modalities; each attention
/// direction has its own bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub gcn: GcnParams,
    pub attention: Option<AttentionParams>,
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
}

fn init_bank(rng: &mut ChaCha8Rng, d: usize, d_ff: usize) -> AttentionBank {
    let mut b = AttentionBank::zeros(d, d_ff);
    b.wq = uniform_init(rng, d, d);
    b.wk = uniform_init(rng, d, d);
    b.wv = uniform_init(rng, d, d);
    b.wo = uniform_init(rng, d, d);
    b.ffn_w1 = uniform_init(rng, d, d_ff);
    b.ffn_w2 = uniform_init(rng, d_ff, d);
    b
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![2 + config.d_feat];
        dims.extend(std::iter::repeat_n(config.hidden, config.gcn_layers - 1));
        dims.push(config.d_embed);
        let weights = dims.windows(2).map(|w| uniform_init(&mut rng, w[0], w[1])).collect();
        let attention = config.cross_attention.then(|| {
            let d = config.token_dim();
            AttentionParams {
                skull: init_bank(&mut rng, d, config.d_ff),
                face: init_bank(&mut rng, d, config.d_ff),
                heads: config.heads,
            }
        });
        Ok(Self {
            config,
            gcn: GcnParams {
                weights,
                final_relu: config.final_relu,
            },
            attention,
        })
    }

    /// Parameter names and values in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> =
            self.gcn.weights.iter().enumerate().map(|(l, w)| (format!("gcn.W{l}"), w)).collect();
        if let Some(att) = &self.attention {
            for (side, bank) in [("s", &att.skull), ("f", &att.face)] {
                for (name, t) in bank.tensors() {
                    out.push((bank_tensor_name(side, name), t));
                }
            }
        }
        out
    }

    /// Mutable parameters in the same order as [`Model::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = self.gcn.weights.iter_mut().collect();
        if let Some(att) = &mut self.attention {
            out.extend(att.skull.tensors_mut());
            out.extend(att.face.tensors_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters rounded to `f32`, with `extra` merged into the config echo.
    pub fn to_checkpoint(&self, extra: &BTreeMap<String, String>) -> ModelCheckpoint {
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                rows: t.nrows(),
                cols: t.ncols(),
                data: t.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        let mut config = self.config.to_map();
        config.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        ModelCheckpoint { tensors, config }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let config = ModelConfig::from_map(&ckpt.config)?;
        let mut model = Self::init(config, 0)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        if ckpt.tensors.len() != names.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} tensors, model expects {}",
                ckpt.tensors.len(),
                names.len()
            )));
        }
        for (name, slot) in names.iter().zip(model.tensors_mut()) {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| Error::shape(format!("checkpoint lacks tensor {name}")))?;
            if (t.rows, t.cols) != slot.dim() {
                return Err(Error::shape(format!("tensor {name}: {}x{}, expected {:?}", t.rows, t.cols, slot.dim())));
            }
            *slot = Array2::from_shape_vec((t.rows, t.cols), t.data.iter().map(|&v| v as f64).collect())
                .expect("shape checked");
        }
        Ok(model)
    }
}

fn bank_tensor_name(side: &str, name: &str) -> String {
    match name {
        "WQ" | "WK" | "WV" | "WO" if side == "s" => format!("attn.{name}"),
        "WQ" | "WK" | "WV" | "WO" => format!("attn.{name}p"),
        "W1" | "b1" | "W2" | "b2" => format!("ffn.{side}.{name}"),
        ln => {
            let (which, param) = ln.split_once('.').expect("ln tensor name");
            format!("ln.{side}.{}.{param}", &which[2..])
        }
    }
}

/// Model parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub gcn: Vec<Var>,
    pub banks: Option<(BankVars, BankVars)>,
    heads: usize,
    final_relu: bool,
}

impl ModelVars {
    pub fn record(tape: &mut Tape, model: &Model, trainable: bool) -> Self {
        let gcn = model
            .gcn
            .weights
            .iter()
            .map(|w| if trainable { tape.param(w.clone()) } else { tape.constant(w.clone()) })
            .collect();
        let banks = model.attention.as_ref().map(|a| {
            (
                BankVars::record(tape, &a.skull, trainable),
                BankVars::record(tape, &a.face, trainable),
            )
        });
        Self {
            gcn,
            banks,
            heads: model.attention.as_ref().map_or(0, |a| a.heads),
            final_relu: model.gcn.final_relu,
        }
    }

    /// Handles in the order of [`Model::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.gcn.clone();
        if let Some((s, f)) = &self.banks {
            out.extend(s.vars());
            out.extend(f.vars());
        }
        out
    }

    /// Gradients per parameter, zero where a parameter did not contribute.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> Vec<Array2<f64>> {
        self.vars().into_iter().map(|v| grads.get_or_zeros(v, tape.shape(v))).collect()
    }
}

/// One encoded graph ready for the GCN: node features, normalised
/// adjacency and the global image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub view: View,
    pub modality: Modality,
    pub x: Array2<f64>,
    pub adj: Array2<f64>,
    pub global: Array1<f64>,
}

/// Skull-side and face-side samples aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSamples {
    pub skull: Vec<Sample>,
    pub face: Vec<Sample>,
}

impl PairedSamples {
    pub fn len(&self) -> usize {
        self.skull.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skull.is_empty()
    }

    /// Indices grouped by view, in sample order.
    pub fn by_view(&self) -> BTreeMap<View, Vec<usize>> {
        let mut out: BTreeMap<View, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.skull.iter().enumerate() {
            out.entry(s.view).or_default().push(i);
        }
        out
    }
}

/// Feature lookup: in-memory matrices first, then files relative to the manifest.
pub struct FeatureStore<'a> {
    pub memory: Option<&'a BTreeMap<String, FeatureMatrix>>,
}

impl FeatureStore<'_> {
    pub fn disk() -> Self {
        FeatureStore { memory: None }
    }

    fn load(&self, manifest: &DatasetManifest, reference: &str) -> Result<Array2<f64>> {
        if let Some(m) = self.memory.and_then(|m| m.get(reference)) {
            return Ok(m.to_array());
        }
        Ok(load_feature_file(manifest.resolve(reference))?.to_array())
    }
}

fn record_image(record: &SampleRecord, manifest: &DatasetManifest) -> Result<Option<Array2<f64>>> {
    record.image_ref.as_ref().map(|r| load_gray_image(manifest.resolve(r))).transpose()
}

fn graph_with_image(
    record: &SampleRecord,
    manifest: &DatasetManifest,
    image: Option<&Array2<f64>>,
    graph_cfg: &GraphConfig,
    store: &FeatureStore<'_>,
) -> Result<LandmarkGraph> {
    match (&record.patch_features_ref, image) {
        (Some(r), _) => {
            let f = store.load(manifest, r)?;
            build_graph(&record.landmarks, NodeSource::Features(&f), record.image_size, graph_cfg)
        }
        (None, Some(img)) => build_graph(&record.landmarks, NodeSource::Image(img), record.image_size, graph_cfg),
        (None, None) => Err(Error::invalid(format!("record {}: neither patch features nor an image", record.id))),
    }
}

/// The landmark graph of one record, from stored patch features when the
/// record has them and from its image otherwise.
pub fn record_graph(
    record: &SampleRecord,
    manifest: &DatasetManifest,
    graph_cfg: &GraphConfig,
    store: &FeatureStore<'_>,
) -> Result<LandmarkGraph> {
    let image = if record.patch_features_ref.is_some() { None } else { record_image(record, manifest)? };
    graph_with_image(record, manifest, image.as_ref(), graph_cfg, store)
}

pub fn prepare_sample(
    record: &SampleRecord,
    manifest: &DatasetManifest,
    graph_cfg: &GraphConfig,
    d_g: usize,
    store: &FeatureStore<'_>,
) -> Result<Sample> {
    let image = record_image(record, manifest)?;
    let graph = graph_with_image(record, manifest, image.as_ref(), graph_cfg, store)?;
    let global = match (&record.global_feature_ref, &image) {
        (Some(r), _) => {
            let g = store.load(manifest, r)?;
            toy_global_feature(Some(GlobalSource::Precomputed(g.as_slice().expect("contiguous"))), d_g)?
        }
        (None, Some(img)) => toy_global_feature(Some(GlobalSource::Image(img)), d_g)?,
        (None, None) => toy_global_feature(None, d_g)?,
    };
    let adj = normalize_adjacency(&graph.edges, graph.n())?;
    Ok(Sample {
        id: record.id.clone(),
        view: record.view,
        modality: record.modality,
        x: graph.x,
        adj,
        global,
    })
}

/// Builds index-aligned samples from a skull-side (A) and face-side (B) manifest.
pub fn prepare_pairs(
    skull: &DatasetManifest,
    face: &DatasetManifest,
    graph_cfg: &GraphConfig,
    d_g: usize,
    store: &FeatureStore<'_>,
) -> Result<PairedSamples> {
    check_paired(skull, face)?;
    let mut a: Vec<&SampleRecord> = skull.records.iter().collect();
    let mut b: Vec<&SampleRecord> = face.records.iter().collect();
    a.sort_by_key(|r| (r.view, r.id.clone()));
    b.sort_by_key(|r| (r.view, r.id.clone()));
    let prep = |rs: Vec<&SampleRecord>, m: &DatasetManifest| {
        rs.into_iter()
            .map(|r| prepare_sample(r, m, graph_cfg, d_g, store))
            .collect::<Result<Vec<_>>>()
    };
    Ok(PairedSamples {
        skull: prep(a, skull)?,
        face: prep(b, face)?,
    })
}

/// Scoring and OT settings shared by training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    pub beta: f64,
    pub sinkhorn: SinkhornConfig,
    pub ot_gradient: OtGradient,
}

/// Token sequence `[H ‖ f_global]` for one sample on the tape.
pub fn encode_var(tape: &mut Tape, mv: &ModelVars, sample: &Sample) -> Var {
    let x = tape.constant(sample.x.clone());
    let adj = tape.constant(sample.adj.clone());
    let h = gcn_forward_var(tape, x, adj, &mv.gcn, mv.final_relu);
    let g = tape.constant(sample.global.clone().insert_axis(ndarray::Axis(0)));
    build_tokens_var(tape, h, g)
}

/// Tape handles for one (skull, face) pair.
#[derive(Debug, Clone, Copy)]
pub struct PairVars {
    /// Global cosine `S` as a `1 × 1` node.
    pub global: Var,
    /// `<T, C>` as a `1 × 1` node, when OT is enabled.
    pub ot_cost: Option<Var>,
    /// Combined similarity as a `1 × 1` node.
    pub combined: Var,
}

/// Global cosine only; skips the OT solve. Used for negative mining.
pub fn pair_global_var(tape: &mut Tape, mv: &ModelVars, ts: Var, tf: Var) -> (Var, Var, Var) {
    let (es, ef) = match &mv.banks {
        Some((s, f)) => enhance_var(tape, ts, tf, s, f, mv.heads),
        None => (ts, tf),
    };
    let gs = global_embed_var(tape, es);
    let gf = global_embed_var(tape, ef);
    (tape.matmul_t(gs, gf), es, ef)
}

pub fn pair_var(tape: &mut Tape, mv: &ModelVars, ts: Var, tf: Var, use_ot: bool, score: &ScoreConfig) -> Result<PairVars> {
    let (global, es, ef) = pair_global_var(tape, mv, ts, tf);
    if !use_ot {
        return Ok(PairVars {
            global,
            ot_cost: None,
            combined: global,
        });
    }
    let cost = cosine_cost_var(tape, es, ef);
    let ot_cost = ot_loss_var(tape, cost, &score.sinkhorn, score.ot_gradient)?;
    // beta * S + (1 - beta) * tanh(-<T, C>)
    let neg = tape.scale(ot_cost, -1.0);
    let t = tape.tanh(neg);
    let a = tape.scale(global, score.beta);
    let b = tape.scale(t, 1.0 - score.beta);
    let combined = tape.add(a, b);
    Ok(PairVars {
        global,
        ot_cost: Some(ot_cost),
        combined,
    })
}

/// Forward-only pair scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    pub global: f64,
    pub ot_similarity: Option<f64>,
    pub combined: f64,
}

/// Scores `query` (skull side) against every gallery sample (face side).
pub fn score_against(model: &Model, query: &Sample, gallery: &[&Sample], score: &ScoreConfig) -> Result<Vec<PairScore>> {
    let mut tape = Tape::new();
    let mv = ModelVars::record(&mut tape, model, false);
    let tq = encode_var(&mut tape, &mv, query);
    let mut out = Vec::with_capacity(gallery.len());
    for g in gallery {
        let tg = encode_var(&mut tape, &mv, g);
        let p = pair_var(&mut tape, &mv, tq, tg, model.config.use_ot, score)?;
        out.push(PairScore {
            global: tape.scalar(p.global),
            ot_similarity: p.ot_cost.map(|c| -tape.scalar(c)),
            combined: tape.scalar(p.combined),
        });
    }
    Ok(out)
}

/// Global cosine of `query` against every gallery sample.
pub fn global_scores(model: &Model, query: &Sample, gallery: &[&Sample]) -> Vec<f64> {
    let mut tape = Tape::new();
    let mv = ModelVars::record(&mut tape, model, false);
    let tq = encode_var(&mut tape, &mv, query);
    gallery
        .iter()
        .map(|g| {
            let tg = encode_var(&mut tape, &mv, g);
            let (s, _, _) = pair_global_var(&mut tape, &mv, tq, tg);
            tape.scalar(s)
        })
        .collect()
}

/// `[z ‖ f_global]` for one sample, L2-normalised (pre-attention view).
pub fn fused_embedding(model: &Model, sample: &Sample) -> Array1<f64> {
    let mut tape = Tape::new();
    let mv = ModelVars::record(&mut tape, model, false);
    let t = encode_var(&mut tape, &mv, sample);
    let g = global_embed_var(&mut tape, t);
    tape.value(g).row(0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_synthetic, SynthConfig};
    use crate::graph::PatchConfig;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_feat: 4,
            hidden: 4,
            d_embed: 4,
            d_g: 2,
            heads: 2,
            d_ff: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Model::init(tiny_config(), 3).unwrap();
        let b = Model::init(tiny_config(), 3).unwrap();
        let c = Model::init(tiny_config(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, t) in a.named_tensors() {
            let bound = 1.0 / (t.nrows() as f64).sqrt();
            if name.contains("gamma") {
                assert!(t.iter().all(|&v| v == 1.0));
            } else if name.contains("beta") || name.ends_with(".b1") || name.ends_with(".b2") {
                assert!(t.iter().all(|&v| v == 0.0));
            } else {
                assert!(t.iter().all(|&v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn tensor_names_are_unique_and_ordered() {
        let m = Model::init(tiny_config(), 0).unwrap();
        let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert_eq!(names[0], "gcn.W0");
        assert!(names.contains(&"attn.WQp".to_string()));
        assert!(names.contains(&"ln.f.2.gamma".to_string()));
        assert!(names.contains(&"ffn.s.b1".to_string()));
        assert_eq!(names.len(), 2 + 24);
    }

    #[test]
    fn checkpoint_round_trip_rounds_to_f32() {
        let m = Model::init(tiny_config(), 1).unwrap();
        let ckpt = m.to_checkpoint(&BTreeMap::new());
        let back = Model::from_checkpoint(&ModelCheckpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        for ((_, a), (_, b)) in m.named_tensors().iter().zip(back.named_tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
        let again = back.to_checkpoint(&BTreeMap::new());
        assert_eq!(again.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
    }

    #[test]
    fn config_map_round_trip() {
        let c = ModelConfig {
            cross_attention: false,
            d_g: 7,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::from_map(&c.to_map()).unwrap(), c);
        let mut bad = c.to_map();
        bad.insert("hidden".into(), "many".into());
        assert!(ModelConfig::from_map(&bad).is_err());
    }

    #[test]
    fn identical_pair_has_unit_global_cosine() {
        let ds = generate_synthetic(&SynthConfig {
            n_identities: 3,
            n_landmarks: 4,
            d_feat: 4,
            d_g: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let gcfg = GraphConfig {
            patch: PatchConfig::new(8, 4).unwrap(),
            k: 2,
            normalize_coords: true,
        };
        let store = FeatureStore { memory: Some(&ds.features) };
        let pairs = prepare_pairs(&ds.a, &ds.b, &gcfg, 2, &store).unwrap();
        assert_eq!(pairs.len(), 3);
        let mut cfg = tiny_config();
        cfg.cross_attention = false;
        let m = Model::init(cfg, 0).unwrap();
        let s = global_scores(&m, &pairs.skull[0], &[&pairs.skull[0]]);
        assert!((s[0] - 1.0).abs() < 1e-12);
    }
}
