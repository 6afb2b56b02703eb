//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Runs without the libtest harness so the
//! lines always reach the terminal.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use landmark_match::attention::{multi_head_cross_attention_with_maps, AttentionBank, AttentionParams, Direction};
use landmark_match::data_io::{generate_synthetic, Split, SynthConfig};
use landmark_match::eval::{evaluate, GalleryMode, MetricReport, DEFAULT_KS};
use landmark_match::graph::{knn_edges, GraphConfig, PatchConfig};
use landmark_match::model::{prepare_pairs, FeatureStore, Model, ModelConfig, PairedSamples};
use landmark_match::ot::{entropic_objective, sinkhorn, sinkhorn_uniform, SinkhornConfig};
use landmark_match::training::{canonical_instance, pipeline_gradcheck, train, TripletConfig, DEFAULT_FD_STEP};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SINKHORN_TOL: f64 = 1e-6;
const SHIFT_TOL: f64 = 1e-8;
const GRADCHECK_TOL: f64 = 1e-4;
const ROW_SUM_TOL: f64 = 1e-6;
/// Permuting keys reorders floating-point sums, so equality is to rounding.
const PERMUTATION_TOL: f64 = 1e-12;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, elapsed: Duration, o: &Outcome) -> bool {
    println!(
        "criterion {n:>2} {name:<28} {}  {} ({:.1}s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    o.pass
}

fn uniform_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, m), || rng.random_range(lo..hi))
}

fn sinkhorn_marginals() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = SinkhornConfig::new(0.1, 80);
    let mut worst: f64 = 0.0;
    let mut over = 0;
    for _ in 0..50 {
        let c = uniform_matrix(&mut rng, 16, 16, 0.0, 2.0);
        let v = sinkhorn_uniform(&c, &cfg).unwrap().marginal_violation();
        worst = worst.max(v);
        over += usize::from(v > SINKHORN_TOL);
    }
    Outcome {
        pass: worst <= SINKHORN_TOL,
        detail: format!("max violation {worst:.3e} (tol {SINKHORN_TOL:e}), {over}/50 over"),
    }
}

/// T* is the solver's fixed point, so each problem is solved to convergence
/// rather than stopped at the training budget of 80 rounds.
fn ot_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let cfg = SinkhornConfig {
        tol: Some(1e-13),
        ..SinkhornConfig::new(0.1, 1_000_000)
    };
    let mut rounds = 0;
    let mut beaten = 0;
    let mut min_gap = f64::INFINITY;
    for _ in 0..20 {
        let c = uniform_matrix(&mut rng, 2, 2, 0.0, 2.0);
        let a: f64 = rng.random_range(0.1..0.9);
        let b: f64 = rng.random_range(0.1..0.9);
        let mu = Array1::from(vec![a, 1.0 - a]);
        let nu = Array1::from(vec![b, 1.0 - b]);
        let star = sinkhorn(&c, &mu, &nu, &cfg).unwrap();
        rounds = rounds.max(star.iters);
        let f_star = entropic_objective(&star.plan, &c, cfg.eps);
        let (lo, hi) = ((a - (1.0 - b)).max(0.0), a.min(b));
        for _ in 0..10_000 {
            let t: f64 = rng.random_range(lo..=hi);
            let plan = Array2::from_shape_vec((2, 2), vec![t, a - t, b - t, 1.0 - a - b + t]).unwrap();
            let gap = entropic_objective(&plan, &c, cfg.eps) - f_star;
            min_gap = min_gap.min(gap);
            if gap < 0.0 {
                beaten += 1;
            }
        }
    }
    Outcome {
        pass: beaten == 0,
        detail: format!("{beaten} of 200000 random plans beat T*, smallest gap {min_gap:.3e}, up to {rounds} rounds"),
    }
}

fn constant_shift() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let cfg = SinkhornConfig::new(0.1, 80);
    let (mut plan_dev, mut cost_dev): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let n = rng.random_range(2..=16);
        let m = rng.random_range(2..=16);
        let c = uniform_matrix(&mut rng, n, m, 0.0, 2.0);
        let base = sinkhorn_uniform(&c, &cfg).unwrap().plan;
        for shift in [-1.0, 0.5, 3.0] {
            let shifted = &c + shift;
            let plan = sinkhorn_uniform(&shifted, &cfg).unwrap().plan;
            plan_dev = plan_dev.max((&plan - &base).iter().fold(0.0, |a, v| a.max(v.abs())));
            let delta = (&base * &shifted).sum() - (&base * &c).sum();
            cost_dev = cost_dev.max((delta - shift).abs());
        }
    }
    Outcome {
        pass: plan_dev <= SHIFT_TOL && cost_dev <= SHIFT_TOL,
        detail: format!("plan deviation {plan_dev:.2e}, cost-shift deviation {cost_dev:.2e} (tol {SHIFT_TOL:e})"),
    }
}

fn gradient_check() -> Outcome {
    let inst = canonical_instance(0).unwrap();
    let all = inst.model.parameter_count();
    let r = pipeline_gradcheck(&inst, all, DEFAULT_FD_STEP, 0).unwrap();
    let fine = pipeline_gradcheck(&inst, all, 1e-5, 0).unwrap();
    let (name, idx) = r.worst.clone().unwrap();
    Outcome {
        pass: r.max_rel_error <= GRADCHECK_TOL,
        detail: format!(
            "max rel error {:.2e} over {} params at h={DEFAULT_FD_STEP:e} (worst {name}[{idx}]); h=1e-5 gives {:.2e}",
            r.max_rel_error, r.probes, fine.max_rel_error
        ),
    }
}

fn random_bank(rng: &mut ChaCha8Rng, d: usize) -> AttentionBank {
    let mut bank = AttentionBank::zeros(d, 4);
    for w in [&mut bank.wq, &mut bank.wk, &mut bank.wv, &mut bank.wo] {
        *w = uniform_matrix(rng, d, d, -1.0, 1.0);
    }
    bank
}

fn permute_rows(x: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(x.dim(), |(i, j)| x[[perm[i], j]])
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (mut row_dev, mut key_dev, mut query_dev): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let heads = rng.random_range(1..=4);
        let d = heads * rng.random_range(1..=6);
        let nq = rng.random_range(1..=10);
        let nk = rng.random_range(1..=10);
        let params = AttentionParams {
            skull: random_bank(&mut rng, d),
            face: random_bank(&mut rng, d),
            heads,
        };
        let direction = if rng.random_bool(0.5) { Direction::SkullQuery } else { Direction::FaceQuery };
        let xq = uniform_matrix(&mut rng, nq, d, -2.0, 2.0);
        let xk = uniform_matrix(&mut rng, nk, d, -2.0, 2.0);
        let (out, maps) = multi_head_cross_attention_with_maps(&xq, &xk, &params, direction).unwrap();
        for a in &maps {
            for row in a.rows() {
                row_dev = row_dev.max((row.sum() - 1.0).abs());
            }
        }
        let pk = shuffled(&mut rng, nk);
        let (out_k, _) = multi_head_cross_attention_with_maps(&xq, &permute_rows(&xk, &pk), &params, direction).unwrap();
        key_dev = key_dev.max(max_abs_diff(&out, &out_k));
        let pq = shuffled(&mut rng, nq);
        let (out_q, _) = multi_head_cross_attention_with_maps(&permute_rows(&xq, &pq), &xk, &params, direction).unwrap();
        query_dev = query_dev.max(max_abs_diff(&permute_rows(&out, &pq), &out_q));
    }
    Outcome {
        pass: row_dev <= ROW_SUM_TOL && key_dev <= PERMUTATION_TOL && query_dev <= PERMUTATION_TOL,
        detail: format!("row-sum dev {row_dev:.1e}, key-perm dev {key_dev:.1e}, query-perm dev {query_dev:.1e}"),
    }
}

/// Exhaustive neighbours: every other point sorted by (squared distance, index).
fn knn_oracle(points: &[[f64; 2]], k: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let mut others: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(others.into_iter().take(k).map(|(_, j)| (i, j)));
    }
    edges
}

fn knn_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut checked = 0;
    let mut mismatched = 0;
    for set in 0..200 {
        let n = rng.random_range(2..=12);
        // Every other set lives on a coarse grid so equal distances are common.
        let points: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                if set % 2 == 0 {
                    [rng.random_range(0..4) as f64, rng.random_range(0..4) as f64]
                } else {
                    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
                }
            })
            .collect();
        for k in 1..n {
            checked += 1;
            if knn_edges(&points, k).unwrap() != knn_oracle(&points, k) {
                mismatched += 1;
            }
        }
    }
    Outcome {
        pass: mismatched == 0,
        detail: format!("{mismatched} mismatches over {checked} (set, k) cases"),
    }
}

struct Experiment {
    train: PairedSamples,
    val: PairedSamples,
    test: PairedSamples,
}

fn experiment_data() -> Experiment {
    let ds = generate_synthetic(&SynthConfig {
        n_identities: 96,
        n_landmarks: 18,
        d_feat: 16,
        d_g: 64,
        seed: 7,
        cross_modal_noise: 0.05,
        ..SynthConfig::default()
    })
    .unwrap();
    let parts = ds.split(&[(Split::Train, 64), (Split::Val, 16), (Split::Test, 16)]).unwrap();
    let gcfg = GraphConfig {
        patch: PatchConfig::new(16, 16).unwrap(),
        k: 4,
        normalize_coords: true,
    };
    let store = FeatureStore { memory: Some(&ds.features) };
    let mut p = parts.iter().map(|(a, b)| prepare_pairs(a, b, &gcfg, 64, &store).unwrap());
    Experiment {
        train: p.next().unwrap(),
        val: p.next().unwrap(),
        test: p.next().unwrap(),
    }
}

fn model_config(full: bool) -> ModelConfig {
    ModelConfig {
        d_feat: 16,
        hidden: 128,
        d_embed: 64,
        d_g: 64,
        heads: 4,
        d_ff: 512,
        cross_attention: full,
        use_ot: full,
        ..ModelConfig::default()
    }
}

fn triplet_config(full: bool) -> TripletConfig {
    TripletConfig {
        lr: 1e-3,
        epochs: 50,
        seed: 1,
        beta: if full { 0.5 } else { 1.0 },
        lambda_ot: if full { 0.1 } else { 0.0 },
        ..TripletConfig::default()
    }
}

struct Run {
    checkpoint: Vec<u8>,
    untrained_test: MetricReport,
    train: MetricReport,
    test: MetricReport,
    best_epoch: usize,
}

fn run_experiment(data: &Experiment, full: bool) -> Run {
    let cfg = triplet_config(full);
    let score = cfg.score_config();
    let model = Model::init(model_config(full), cfg.seed).unwrap();
    let untrained_test = evaluate(&model, &data.test, &score, GalleryMode::PerView, &DEFAULT_KS).unwrap();
    let out = train(model, &data.train, Some(&data.val), &cfg, |_| {}).unwrap();
    let extra: BTreeMap<String, String> = cfg.to_map();
    Run {
        checkpoint: out.best.to_checkpoint(&extra).to_bytes().unwrap(),
        untrained_test,
        train: evaluate(&out.best, &data.train, &score, GalleryMode::PerView, &DEFAULT_KS).unwrap(),
        test: evaluate(&out.best, &data.test, &score, GalleryMode::PerView, &DEFAULT_KS).unwrap(),
        best_epoch: out.best_epoch,
    }
}

fn learnability(run: &Run) -> Outcome {
    let (tr, te, chance) = (run.train.recall[0], run.test.recall[0], run.untrained_test.recall[0]);
    Outcome {
        pass: tr >= 0.9 && te >= 0.6 && te > chance,
        detail: format!("train R@1 {tr:.3} (>= 0.9), held-out R@1 {te:.3} (>= 0.6, untrained {chance:.3}), best epoch {}", run.best_epoch),
    }
}

fn ablation(full: &Run, plain: &Run) -> Outcome {
    let (a, b) = (full.test.recall_at(5).unwrap(), plain.test.recall_at(5).unwrap());
    Outcome {
        pass: a - b >= 0.0,
        detail: format!("held-out R@5 OT+CA {a:.3} vs neither {b:.3}, delta {:+.3}", a - b),
    }
}

fn metric_consistency(reports: &[&MetricReport]) -> Outcome {
    let bad = reports
        .iter()
        .filter(|r| r.map_at(1) != r.recall_at(1) || r.recall.windows(2).any(|w| w[1] < w[0]))
        .count();
    Outcome {
        pass: bad == 0,
        detail: format!("{bad} of {} reports violate mAP@1 = R@1 or monotone R@K", reports.len()),
    }
}

fn determinism(first: &Run, second: &Run) -> Outcome {
    let same_ckpt = first.checkpoint == second.checkpoint;
    let same_metrics = first.train == second.train && first.test == second.test && first.train.table() == second.train.table();
    Outcome {
        pass: same_ckpt && same_metrics,
        detail: format!(
            "checkpoint bytes identical: {same_ckpt} ({} bytes), metric reports identical: {same_metrics}",
            first.checkpoint.len()
        ),
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut all = true;
    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed())
    };
    let quick: [(usize, &str, &dyn Fn() -> Outcome); 6] = [
        (1, "sinkhorn marginals", &sinkhorn_marginals),
        (2, "ot optimality oracle", &ot_optimality),
        (3, "constant-shift identity", &constant_shift),
        (4, "gradient check", &gradient_check),
        (5, "attention invariants", &attention_invariants),
        (6, "knn oracle equivalence", &knn_equivalence),
    ];
    let budgets = [5.0, 10.0, f64::INFINITY, 60.0, f64::INFINITY, f64::INFINITY];
    for ((n, name, f), budget) in quick.into_iter().zip(budgets) {
        let (mut o, dt) = timed(f);
        if dt.as_secs_f64() >= budget {
            o.pass = false;
            o.detail.push_str(&format!(", over the {budget}s budget"));
        }
        all &= report(n, name, dt, &o);
    }

    let data = experiment_data();
    let t = Instant::now();
    let full = run_experiment(&data, true);
    let dt7 = t.elapsed();
    let mut o7 = learnability(&full);
    if dt7.as_secs_f64() >= 900.0 {
        o7.pass = false;
        o7.detail.push_str(", over the 15 min budget");
    }
    all &= report(7, "synthetic learnability", dt7, &o7);

    let t = Instant::now();
    let plain = run_experiment(&data, false);
    all &= report(8, "ablation direction", t.elapsed(), &ablation(&full, &plain));

    let t = Instant::now();
    let repeat = run_experiment(&data, true);
    let dt10 = t.elapsed();

    let reports = [
        &full.untrained_test,
        &full.train,
        &full.test,
        &plain.untrained_test,
        &plain.train,
        &plain.test,
        &repeat.train,
        &repeat.test,
    ];
    all &= report(9, "metric self-consistency", Duration::ZERO, &metric_consistency(&reports));
    all &= report(10, "determinism", dt10, &determinism(&full, &repeat));
    println!("\nheld-out report, OT+CA:\n{}", full.test.table());
    if !all {
        std::process::exit(1);
    }
}
