//! Triplet training over paired samples with in-batch hardest negatives.

mod gradcheck;
mod loss;
mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gradcheck::{canonical_instance, finite_difference_check, DEFAULT_FD_STEP, pipeline_gradcheck, GradCheckReport, TinyInstance};
pub use loss::{combined_similarity, global_similarity_matrix, mine_hardest_negative, total_loss, triplet_loss};
pub use optim::AdamW;

use crate::error::{Error, Result};
use crate::eval::{evaluate, GalleryMode};
use crate::model::{encode_var, global_scores, pair_var, Model, ModelVars, PairedSamples, ScoreConfig};
use crate::ot::{OtGradient, SinkhornConfig};
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletConfig {
    pub margin: f64,
    pub beta: f64,
    pub lambda_ot: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub eps: f64,
    pub iters: usize,
    pub seed: u64,
    pub ot_gradient: OtGradient,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            beta: 0.5,
            lambda_ot: 0.1,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 1e-5,
            epochs: 50,
            eps: 0.1,
            iters: 80,
            seed: 0,
            ot_gradient: OtGradient::Unrolled,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.margin > 0.0) {
            return Err(Error::invalid(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.lambda_ot >= 0.0) {
            return Err(Error::invalid(format!("lambda_ot must be non-negative, got {}", self.lambda_ot)));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2 so negatives exist"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate must be positive and weight decay non-negative"));
        }
        self.sinkhorn().validate()
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig::new(self.eps, self.iters)
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            beta: self.beta,
            sinkhorn: self.sinkhorn(),
            ot_gradient: self.ot_gradient,
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        crate::model::flat_map(self)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        crate::model::from_flat_map(map)
    }
}

/// Losses and gradients for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub l_triplet: f64,
    pub l_ot: f64,
    pub l_total: f64,
    /// Fraction of anchors whose positive tops the global similarity row.
    pub r1: f64,
    pub negatives: Vec<usize>,
    pub grads: Vec<Array2<f64>>,
}

struct AnchorTerms {
    hinge: f64,
    ot_pos: f64,
    grads: Vec<Array2<f64>>,
}

/// Per-anchor loss `(hinge + lambda * <T, C>_pos) / B`, recorded on its own tape.
fn anchor_terms(
    model: &Model,
    pairs: &PairedSamples,
    anchor: usize,
    negative: usize,
    batch: usize,
    cfg: &TripletConfig,
    with_grads: bool,
) -> Result<AnchorTerms> {
    let score = cfg.score_config();
    let use_ot = model.config.use_ot;
    let mut tape = Tape::new();
    let mv = ModelVars::record(&mut tape, model, true);
    let ts = encode_var(&mut tape, &mv, &pairs.skull[anchor]);
    let tp = encode_var(&mut tape, &mv, &pairs.face[anchor]);
    let tn = encode_var(&mut tape, &mv, &pairs.face[negative]);
    let pos = pair_var(&mut tape, &mv, ts, tp, use_ot, &score)?;
    let neg = pair_var(&mut tape, &mv, ts, tn, use_ot, &score)?;
    let gap = tape.sub(neg.combined, pos.combined);
    let gap = tape.offset(gap, cfg.margin);
    let hinge = tape.relu(gap);
    let mut loss = hinge;
    if let Some(c) = pos.ot_cost {
        let weighted = tape.scale(c, cfg.lambda_ot);
        loss = tape.add(loss, weighted);
    }
    let loss = tape.scale(loss, 1.0 / batch as f64);
    let grads = if with_grads {
        let g = tape.backward(loss);
        mv.collect(&tape, &g)
    } else {
        Vec::new()
    };
    Ok(AnchorTerms {
        hinge: tape.scalar(hinge),
        ot_pos: pos.ot_cost.map_or(0.0, |c| tape.scalar(c)),
        grads,
    })
}

/// Global similarity matrix for a batch, computed pair by pair.
pub fn batch_similarity(model: &Model, pairs: &PairedSamples, batch: &[usize]) -> Array2<f64> {
    let gallery: Vec<_> = batch.iter().map(|&j| &pairs.face[j]).collect();
    let rows: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|&i| global_scores(model, &pairs.skull[i], &gallery))
        .collect();
    let b = batch.len();
    Array2::from_shape_fn((b, b), |(i, j)| rows[i][j])
}

fn batch_loss(model: &Model, pairs: &PairedSamples, batch: &[usize], cfg: &TripletConfig, with_grads: bool) -> Result<BatchOutcome> {
    let b = batch.len();
    let s = batch_similarity(model, pairs, batch);
    let negatives: Vec<usize> = (0..b).map(|i| mine_hardest_negative(&s, i)).collect::<Result<_>>()?;
    let hits = (0..b)
        .filter(|&i| (0..b).all(|j| j == i || s[[i, j]] < s[[i, i]] || (s[[i, j]] == s[[i, i]] && j > i)))
        .count();
    let terms: Vec<AnchorTerms> = (0..b)
        .into_par_iter()
        .map(|i| anchor_terms(model, pairs, batch[i], batch[negatives[i]], b, cfg, with_grads))
        .collect::<Result<_>>()?;
    let l_triplet = terms.iter().map(|t| t.hinge).sum::<f64>() / b as f64;
    let l_ot = terms.iter().map(|t| t.ot_pos).sum::<f64>() / b as f64;
    let l_total = total_loss(l_triplet, l_ot, cfg.lambda_ot);
    let mut grads: Vec<Array2<f64>> = Vec::new();
    for t in terms {
        if grads.is_empty() {
            grads = t.grads;
        } else {
            for (acc, g) in grads.iter_mut().zip(&t.grads) {
                *acc += g;
            }
        }
    }
    Ok(BatchOutcome {
        l_triplet,
        l_ot,
        l_total,
        r1: hits as f64 / b as f64,
        negatives: negatives.iter().map(|&j| batch[j]).collect(),
        grads,
    })
}

/// Forward and backward pass over one batch of pair indices.
pub fn batch_forward_backward(model: &Model, pairs: &PairedSamples, batch: &[usize], cfg: &TripletConfig) -> Result<BatchOutcome> {
    batch_loss(model, pairs, batch, cfg, true)
}

/// Total batch loss without gradients.
pub fn batch_total_loss(model: &Model, pairs: &PairedSamples, batch: &[usize], cfg: &TripletConfig) -> Result<f64> {
    Ok(batch_loss(model, pairs, batch, cfg, false)?.l_total)
}

/// Identity-disjoint batches: each view is shuffled and chunked separately,
/// and a trailing singleton joins the previous chunk.
pub fn make_batches(pairs: &PairedSamples, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for (view, mut idx) in pairs.by_view() {
        if idx.len() < 2 {
            log::warn!("view {view}: fewer than 2 pairs, skipped");
            continue;
        }
        idx.shuffle(rng);
        let mut chunks: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            let last = chunks.pop().expect("non-empty");
            chunks.last_mut().expect("non-empty").extend(last);
        }
        out.extend(chunks);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_triplet: f64,
    pub l_ot: f64,
    pub l_total: f64,
    pub batch_r1: f64,
    pub val_r1: Option<f64>,
    pub wall_time: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log line serialises")
    }
}

pub struct Trainer {
    pub model: Model,
    pub config: TripletConfig,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TripletConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            optimizer: AdamW::new(config.lr, config.weight_decay),
            config,
            rng,
            epoch: 0,
        })
    }

    /// One pass over the training pairs. Returns mean batch losses.
    pub fn train_epoch(&mut self, pairs: &PairedSamples) -> Result<EpochLog> {
        let start = Instant::now();
        let max_group = pairs.by_view().values().map(Vec::len).max().unwrap_or(0);
        if self.config.batch_size > max_group {
            return Err(Error::invalid(format!(
                "batch size {} exceeds the {max_group} identities available",
                self.config.batch_size
            )));
        }
        let batches = make_batches(pairs, self.config.batch_size, &mut self.rng);
        let (mut lt, mut lo, mut ltot, mut r1) = (0.0, 0.0, 0.0, 0.0);
        for batch in &batches {
            let out = batch_forward_backward(&self.model, pairs, batch, &self.config)?;
            let finite = out.l_total.is_finite() && out.grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Numeric(format!(
                    "epoch {}: non-finite loss or gradient (l_triplet {}, l_ot {}, batch {:?})",
                    self.epoch + 1,
                    out.l_triplet,
                    out.l_ot,
                    batch
                )));
            }
            self.optimizer.update(&mut self.model.tensors_mut(), &out.grads);
            lt += out.l_triplet;
            lo += out.l_ot;
            ltot += out.l_total;
            r1 += out.r1;
        }
        self.epoch += 1;
        let n = batches.len().max(1) as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            l_triplet: lt / n,
            l_ot: lo / n,
            l_total: ltot / n,
            batch_r1: r1 / n,
            val_r1: None,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

pub struct TrainOutcome {
    /// Snapshot with the best validation R@1 (earliest on ties), or the
    /// final model when there is no validation set.
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_r1: Option<f64>,
    pub last: Model,
    pub log: Vec<EpochLog>,
}

pub fn train(
    model: Model,
    train_pairs: &PairedSamples,
    val_pairs: Option<&PairedSamples>,
    cfg: &TripletConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if cfg.epochs == 0 {
        return Err(Error::invalid("nothing to train: epochs is 0"));
    }
    let mut trainer = Trainer::new(model, *cfg)?;
    let score = cfg.score_config();
    let mut best: Option<(Model, usize, Option<f64>)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let start = Instant::now();
        let mut entry = trainer.train_epoch(train_pairs)?;
        if let Some(val) = val_pairs {
            let report = evaluate(&trainer.model, val, &score, GalleryMode::PerView, &[1])?;
            entry.val_r1 = Some(report.recall[0]);
        }
        entry.wall_time = start.elapsed().as_secs_f64();
        let improved = match (&best, entry.val_r1) {
            (None, _) => true,
            (Some((_, _, Some(b))), Some(v)) => v > *b,
            (Some(_), None) => true,
            (Some((_, _, None)), Some(_)) => true,
        };
        if improved {
            best = Some((trainer.model.clone(), entry.epoch, entry.val_r1));
        }
        on_epoch(&entry);
        log.push(entry);
    }
    let (best, best_epoch, best_val_r1) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_r1,
        last: trainer.model,
        log,
    })
}
