//! Central finite differences against the analytic gradients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_forward_backward, batch_total_loss, TripletConfig};
use crate::data_io::{generate_synthetic, SynthConfig};
use crate::error::{Error, Result};
use crate::graph::{GraphConfig, PatchConfig};
use crate::model::{prepare_pairs, FeatureStore, Model, ModelConfig, PairedSamples};
use crate::ot::OtGradient;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and element index of the worst probe.
    pub worst: Option<(String, usize)>,
    pub probes: usize,
}

/// Probes `probe_count` randomly chosen parameter elements. The relative
/// error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_difference_check(
    loss: impl Fn(&[Array2<f64>]) -> Result<f64>,
    params: &[(String, Array2<f64>)],
    analytic: &[Array2<f64>],
    probe_count: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    if params.len() != analytic.len() || params.iter().zip(analytic).any(|((_, p), g)| p.dim() != g.dim()) {
        return Err(Error::shape("analytic gradients do not match the parameters"));
    }
    let total: usize = params.iter().map(|(_, p)| p.len()).sum();
    if total == 0 {
        return Err(Error::invalid("no parameters to probe"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<Array2<f64>> = params.iter().map(|(_, p)| p.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        probes: 0,
    };
    for _ in 0..probe_count.min(total) {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= values[t].len() {
            flat -= values[t].len();
            t += 1;
        }
        let cols = values[t].ncols();
        let idx = (flat / cols, flat % cols);
        let orig = values[t][idx];
        values[t][idx] = orig + h;
        let plus = loss(&values)?;
        values[t][idx] = orig - h;
        let minus = loss(&values)?;
        values[t][idx] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[t][idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.probes += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((params[t].0.clone(), flat));
        }
    }
    Ok(report)
}

/// Default central-difference step for [`pipeline_gradcheck`].
pub const DEFAULT_FD_STEP: f64 = 3e-4;

/// The small fixed problem used for full-pipeline gradient checks.
pub struct TinyInstance {
    pub model: Model,
    pub pairs: PairedSamples,
    pub config: TripletConfig,
}

/// 2 identities, 4 landmarks, `d_feat = 4`, `d_embed = 4`, `d_g = 2`,
/// 2 heads, 10 Sinkhorn iterations.
pub fn canonical_instance(seed: u64) -> Result<TinyInstance> {
    let ds = generate_synthetic(&SynthConfig {
        n_identities: 2,
        n_landmarks: 4,
        d_feat: 4,
        d_g: 2,
        seed,
        cross_modal_noise: 0.3,
        ..SynthConfig::default()
    })?;
    let gcfg = GraphConfig {
        patch: PatchConfig::new(8, 4)?,
        k: 1,
        normalize_coords: true,
    };
    let pairs = prepare_pairs(&ds.a, &ds.b, &gcfg, 2, &FeatureStore { memory: Some(&ds.features) })?;
    let mcfg = ModelConfig {
        d_feat: 4,
        hidden: 4,
        d_embed: 4,
        d_g: 2,
        heads: 2,
        d_ff: 24,
        ..ModelConfig::default()
    };
    let model = Model::init(mcfg, seed)?;
    let config = TripletConfig {
        batch_size: 2,
        iters: 10,
        seed,
        ..TripletConfig::default()
    };
    Ok(TinyInstance { model, pairs, config })
}

/// Checks the gradient of the total batch loss over all pairs of `inst`.
pub fn pipeline_gradcheck(inst: &TinyInstance, probe_count: usize, h: f64, seed: u64) -> Result<GradCheckReport> {
    if inst.config.ot_gradient == OtGradient::Envelope {
        return Err(Error::invalid(
            "gradient check refused: envelope OT gradients treat the plan as constant and are approximate by design",
        ));
    }
    let batch: Vec<usize> = (0..inst.pairs.len()).collect();
    let analytic = batch_forward_backward(&inst.model, &inst.pairs, &batch, &inst.config)?.grads;
    let params: Vec<(String, Array2<f64>)> =
        inst.model.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let loss = |values: &[Array2<f64>]| {
        let mut m = inst.model.clone();
        for (slot, v) in m.tensors_mut().into_iter().zip(values) {
            slot.assign(v);
        }
        batch_total_loss(&m, &inst.pairs, &batch, &inst.config)
    };
    finite_difference_check(loss, &params, &analytic, probe_count, h, seed)
}
