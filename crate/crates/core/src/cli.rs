//! The `landmatch` command line.
//!
//! Every subcommand reads an optional TOML run configuration (`--config`)
//! and then applies its own flags on top. `--seed` overrides every seed in
//! the configuration. Exit status is 0 on success, 1 for validation or
//! check failures and 2 when training hits a non-finite loss.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data_io::{
    check_paired, generate_synthetic, load_checkpoint, load_manifest, save_checkpoint, write_manifest, DatasetManifest,
    Split, SynthConfig, View,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, pca_project, score_gallery, write_projection_csv, GalleryMode, DEFAULT_KS};
use crate::graph::{write_graph_file, GraphConfig, PatchConfig};
use crate::model::{fused_embedding, prepare_pairs, record_graph, FeatureStore, Model, ModelConfig, PairedSamples};
use crate::ot::OtGradient;
use crate::training::{canonical_instance, pipeline_gradcheck, train, TripletConfig, DEFAULT_FD_STEP};

/// File name of the checkpoint written by `train`.
pub const CHECKPOINT_FILE: &str = "model.ckpt";
/// File name of the per-epoch JSON log written by `train`.
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub identities: usize,
    pub landmarks: usize,
    pub d_feat: usize,
    pub d_g: usize,
    pub noise: f64,
    pub modality_gap: f64,
    pub layout_spread: f64,
    pub image_size: u32,
    pub views: Vec<View>,
    /// Identity counts for consecutive train / val / test manifests; zero skips a split.
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            identities: d.n_identities,
            landmarks: d.n_landmarks,
            d_feat: d.d_feat,
            d_g: d.d_g,
            noise: d.cross_modal_noise,
            modality_gap: d.modality_gap,
            layout_spread: d.layout_spread,
            image_size: d.image_size,
            views: d.views,
            train: 0,
            val: 0,
            test: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub k: usize,
    pub patch_half: usize,
    pub normalize_coords: bool,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self {
            k: 4,
            patch_half: 16,
            normalize_coords: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_a: Option<PathBuf>,
    pub train_b: Option<PathBuf>,
    pub val_a: Option<PathBuf>,
    pub val_b: Option<PathBuf>,
}

/// Everything a run needs, as read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataSection,
    pub synth: SynthSection,
    pub graph: GraphSection,
    pub model: ModelConfig,
    pub train: TripletConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn graph_config(&self) -> Result<GraphConfig> {
        Ok(GraphConfig {
            patch: PatchConfig::new(self.graph.patch_half, self.model.d_feat)?,
            k: self.graph.k,
            normalize_coords: self.graph.normalize_coords,
        })
    }

    fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.train.seed = s;
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    /// Keys stored alongside the weights so later commands can rebuild graphs and scores.
    fn checkpoint_extra(&self) -> BTreeMap<String, String> {
        let mut m = self.train.to_map();
        m.insert("graph_k".into(), self.graph.k.to_string());
        m.insert("patch_half".into(), self.graph.patch_half.to_string());
        m.insert("normalize_coords".into(), self.graph.normalize_coords.to_string());
        m
    }
}

#[derive(Debug, Parser)]
#[command(name = "landmatch", version, about = "Cross-modal landmark-graph matching")]
pub struct Cli {
    /// Seed for all random generators; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration. Flags win over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    Synth(SynthArgs),
    /// Build and store the landmark graph of every record in a manifest.
    BuildGraphs(BuildGraphsArgs),
    /// Train on paired manifests and write a checkpoint plus epoch log.
    Train(TrainArgs),
    /// Score every query against its gallery and print R@K / mAP@K.
    Eval(EvalArgs),
    /// Print the top-ranked gallery entries for one query.
    Retrieve(RetrieveArgs),
    /// Export a 2-D PCA projection of the embeddings as CSV.
    Project(ProjectArgs),
    /// Compare analytic and finite-difference gradients on the tiny instance.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub landmarks: Option<usize>,
    #[arg(long)]
    pub d_feat: Option<usize>,
    #[arg(long)]
    pub d_g: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub modality_gap: Option<f64>,
    /// Comma-separated views, e.g. `front,side`.
    #[arg(long, value_delimiter = ',')]
    pub views: Option<Vec<ViewArg>>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ViewArg {
    Front,
    Side,
}

impl From<ViewArg> for View {
    fn from(v: ViewArg) -> Self {
        match v {
            ViewArg::Front => View::Front,
            ViewArg::Side => View::Side,
        }
    }
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub patch_half: Option<usize>,
    #[arg(long)]
    pub d_feat: Option<usize>,
    /// Keep raw pixel coordinates instead of dividing by the image size.
    #[arg(long)]
    pub raw_coords: bool,
}

#[derive(Debug, Args)]
pub struct BuildGraphsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub graph: GraphArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train_a: Option<PathBuf>,
    #[arg(long)]
    pub train_b: Option<PathBuf>,
    #[arg(long)]
    pub val_a: Option<PathBuf>,
    #[arg(long)]
    pub val_b: Option<PathBuf>,
    /// Output directory for the checkpoint and the epoch log.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub d_embed: Option<usize>,
    #[arg(long)]
    pub d_g: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub no_cross_attention: bool,
    #[arg(long)]
    pub no_ot: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda_ot: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub sinkhorn_iters: Option<usize>,
    #[arg(long)]
    pub sinkhorn_eps: Option<f64>,
    /// Treat the transport plan as constant in the backward pass.
    #[arg(long)]
    pub envelope: bool,
}

#[derive(Debug, Args)]
pub struct ScoringArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Query-side (modality A) manifest.
    #[arg(long)]
    pub query: PathBuf,
    /// Gallery-side (modality B) manifest.
    #[arg(long)]
    pub gallery: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    pub ks: Vec<usize>,
    /// Rank against one gallery spanning all views.
    #[arg(long)]
    pub merged: bool,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub id: String,
    #[arg(long, value_enum, default_value = "front")]
    pub view: ViewArg,
    #[arg(long, default_value_t = 10)]
    pub topk: usize,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    pub h: f64,
    #[arg(long, default_value_t = 400)]
    pub probes: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub envelope: bool,
}

/// Parses `std::env::args` and runs the selected command.
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 2,
        _ => 1,
    }
}

/// Runs one parsed invocation. `Ok(false)` means a check ran and failed.
pub fn execute(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed(cli.seed);
    match cli.command {
        Command::Synth(a) => cmd_synth(cfg, a).map(|_| true),
        Command::BuildGraphs(a) => cmd_build_graphs(cfg, a).map(|_| true),
        Command::Train(a) => cmd_train(cfg, a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Retrieve(a) => cmd_retrieve(a).map(|_| true),
        Command::Project(a) => cmd_project(cfg, a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(cfg, a),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    set(&mut s.identities, a.identities);
    set(&mut s.landmarks, a.landmarks);
    set(&mut s.d_feat, a.d_feat);
    set(&mut s.d_g, a.d_g);
    set(&mut s.noise, a.noise);
    set(&mut s.modality_gap, a.modality_gap);
    set(&mut s.views, a.views.map(|v| v.into_iter().map(View::from).collect()));
    set(&mut s.train, a.train);
    set(&mut s.val, a.val);
    set(&mut s.test, a.test);
    let seed = cfg.seed();
    let s = &cfg.synth;
    let ds = generate_synthetic(&SynthConfig {
        n_identities: s.identities,
        n_landmarks: s.landmarks,
        d_feat: s.d_feat,
        d_g: s.d_g,
        seed,
        cross_modal_noise: s.noise,
        modality_gap: s.modality_gap,
        layout_spread: s.layout_spread,
        image_size: s.image_size,
        views: s.views.clone(),
    })?;
    create_dir(&a.out)?;
    let (pa, pb) = ds.write_to(&a.out)?;
    log::info!("seed {seed}: {} identities -> {} and {}", s.identities, pa.display(), pb.display());
    let parts: Vec<(Split, usize)> =
        [(Split::Train, s.train), (Split::Val, s.val), (Split::Test, s.test)].into_iter().filter(|p| p.1 > 0).collect();
    if !parts.is_empty() {
        for ((split, n), (ma, mb)) in parts.iter().zip(ds.split(&parts)?) {
            write_manifest(&ma, a.out.join(format!("{split}_a.jsonl")))?;
            write_manifest(&mb, a.out.join(format!("{split}_b.jsonl")))?;
            log::info!("{split}: {n} identities");
        }
    }
    Ok(())
}

fn apply_graph_args(cfg: &mut RunConfig, g: &GraphArgs) {
    set(&mut cfg.graph.k, g.k);
    set(&mut cfg.graph.patch_half, g.patch_half);
    set(&mut cfg.model.d_feat, g.d_feat);
    if g.raw_coords {
        cfg.graph.normalize_coords = false;
    }
}

fn cmd_build_graphs(mut cfg: RunConfig, a: BuildGraphsArgs) -> Result<()> {
    apply_graph_args(&mut cfg, &a.graph);
    let gcfg = cfg.graph_config()?;
    let manifest = load_manifest(&a.manifest)?;
    create_dir(&a.out)?;
    let store = FeatureStore::disk();
    let mut counts: BTreeMap<View, usize> = BTreeMap::new();
    for r in &manifest.records {
        let g = record_graph(r, &manifest, &gcfg, &store)?;
        write_graph_file(&g, a.out.join(format!("{}_{}_{}.lgraph", r.id, r.view, r.modality)))?;
        *counts.entry(r.view).or_default() += 1;
    }
    for (view, n) in &counts {
        println!("{view}: {n} graphs");
    }
    Ok(())
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path.ok_or_else(|| Error::invalid(format!("missing {what} manifest (flag or [data] entry)")))?;
    if !p.exists() {
        return Err(Error::invalid(format!("{what} manifest {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_pairs(a: &Path, b: &Path, gcfg: &GraphConfig, d_g: usize) -> Result<PairedSamples> {
    let ma = load_manifest(a)?;
    let mb = load_manifest(b)?;
    prepare_pairs(&ma, &mb, gcfg, d_g, &FeatureStore::disk())
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    apply_graph_args(&mut cfg, &a.graph);
    let d = &mut cfg.data;
    set(&mut d.train_a, a.train_a.map(Some));
    set(&mut d.train_b, a.train_b.map(Some));
    set(&mut d.val_a, a.val_a.map(Some));
    set(&mut d.val_b, a.val_b.map(Some));
    let m = &mut cfg.model;
    set(&mut m.hidden, a.hidden);
    set(&mut m.d_embed, a.d_embed);
    set(&mut m.d_g, a.d_g);
    set(&mut m.heads, a.heads);
    set(&mut m.d_ff, a.d_ff);
    m.cross_attention &= !a.no_cross_attention;
    m.use_ot &= !a.no_ot;
    let t = &mut cfg.train;
    set(&mut t.epochs, a.epochs);
    set(&mut t.lr, a.lr);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.margin, a.margin);
    set(&mut t.beta, a.beta);
    set(&mut t.lambda_ot, a.lambda_ot);
    set(&mut t.weight_decay, a.weight_decay);
    set(&mut t.iters, a.sinkhorn_iters);
    set(&mut t.eps, a.sinkhorn_eps);
    if a.envelope {
        t.ot_gradient = OtGradient::Envelope;
    }
    if !cfg.model.use_ot && (cfg.train.beta != 1.0 || cfg.train.lambda_ot != 0.0) {
        log::warn!("OT disabled: scoring with beta = 1 and lambda_ot = 0");
        cfg.train.beta = 1.0;
        cfg.train.lambda_ot = 0.0;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg.train.epochs == 0 {
        return Err(Error::invalid("nothing to train: epochs is 0"));
    }
    let gcfg = cfg.graph_config()?;
    let train_pairs = load_pairs(
        &required(cfg.data.train_a.clone(), "train A")?,
        &required(cfg.data.train_b.clone(), "train B")?,
        &gcfg,
        cfg.model.d_g,
    )?;
    let val_pairs = match (&cfg.data.val_a, &cfg.data.val_b) {
        (Some(va), Some(vb)) => Some(load_pairs(
            &required(Some(va.clone()), "val A")?,
            &required(Some(vb.clone()), "val B")?,
            &gcfg,
            cfg.model.d_g,
        )?),
        (None, None) => None,
        _ => return Err(Error::invalid("give both validation manifests or neither")),
    };
    create_dir(&a.out)?;
    let log_path = a.out.join(LOG_FILE);
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut write_err = None;
    log::info!(
        "seed {}: {} training pairs, {} parameters",
        cfg.train.seed,
        train_pairs.len(),
        Model::init(cfg.model, cfg.train.seed)?.parameter_count()
    );
    let model = Model::init(cfg.model, cfg.train.seed)?;
    let outcome = train(model, &train_pairs, val_pairs.as_ref(), &cfg.train, |e| {
        let line = e.to_json_line();
        log::info!("{line}");
        if let Err(err) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    save_checkpoint(&outcome.best.to_checkpoint(&cfg.checkpoint_extra()), &ckpt_path)?;
    println!(
        "best epoch {} (val R@1 {}) -> {}",
        outcome.best_epoch,
        outcome.best_val_r1.map_or("n/a".to_string(), |v| format!("{v:.4}")),
        ckpt_path.display()
    );
    Ok(())
}

/// A checkpoint with the graph and scoring settings it was trained under.
struct Loaded {
    model: Model,
    triplet: TripletConfig,
    graph: GraphConfig,
}

fn load_trained(path: &Path) -> Result<Loaded> {
    let ckpt = load_checkpoint(path)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let triplet = TripletConfig::from_map(&ckpt.config)?;
    let get = |k: &str| ckpt.config.get(k).ok_or_else(|| Error::invalid(format!("checkpoint config lacks {k}")));
    let parse_err = |k: &str| Error::invalid(format!("checkpoint config key {k} is malformed"));
    let k: usize = get("graph_k")?.parse().map_err(|_| parse_err("graph_k"))?;
    let half: usize = get("patch_half")?.parse().map_err(|_| parse_err("patch_half"))?;
    let normalize_coords: bool = get("normalize_coords")?.parse().map_err(|_| parse_err("normalize_coords"))?;
    let graph = GraphConfig {
        patch: PatchConfig::new(half, model.config.d_feat)?,
        k,
        normalize_coords,
    };
    Ok(Loaded { model, triplet, graph })
}

fn load_scoring(a: &ScoringArgs) -> Result<(Loaded, PairedSamples, DatasetManifest)> {
    let loaded = load_trained(&a.checkpoint)?;
    let mq = load_manifest(&a.query)?;
    let mg = load_manifest(&a.gallery)?;
    check_paired(&mq, &mg)?;
    let pairs = prepare_pairs(&mq, &mg, &loaded.graph, loaded.model.config.d_g, &FeatureStore::disk())?;
    Ok((loaded, pairs, mq))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (loaded, pairs, _) = load_scoring(&a.scoring)?;
    let mode = if a.merged { GalleryMode::Merged } else { GalleryMode::PerView };
    let report = evaluate(&loaded.model, &pairs, &loaded.triplet.score_config(), mode, &a.ks)?;
    print!("{}", report.table());
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    let (loaded, pairs, _) = load_scoring(&a.scoring)?;
    let view = View::from(a.view);
    let query = pairs
        .skull
        .iter()
        .find(|s| s.id == a.id && s.view == view)
        .ok_or_else(|| Error::UnknownId(format!("{} ({view})", a.id)))?;
    let gallery: Vec<_> = pairs.face.iter().filter(|s| s.view == view).collect();
    let ranked = score_gallery(&loaded.model, query, &gallery, &loaded.triplet.score_config())?;
    println!("query {} ({view})", a.id);
    for (rank, (id, score)) in ranked.top(a.topk).enumerate() {
        println!("{:>4}  {id}  {score:.6}", rank + 1);
    }
    Ok(())
}

fn cmd_project(cfg: RunConfig, a: ProjectArgs) -> Result<()> {
    let (loaded, pairs, _) = load_scoring(&a.scoring)?;
    let samples: Vec<_> = pairs.skull.iter().chain(&pairs.face).collect();
    let d = loaded.model.config.token_dim();
    let mut emb = Array2::zeros((samples.len(), d));
    for (mut row, s) in emb.rows_mut().into_iter().zip(&samples) {
        row.assign(&fused_embedding(&loaded.model, s));
    }
    let proj = pca_project(&emb, cfg.seed())?;
    if proj.degenerate {
        log::warn!("embeddings have no variance; all coordinates are zero");
    }
    let labels: Vec<(String, String)> = samples.iter().map(|s| (s.id.clone(), s.modality.to_string())).collect();
    write_projection_csv(&a.out, &labels, &proj)?;
    println!("{} rows -> {}", labels.len(), a.out.display());
    Ok(())
}

fn cmd_gradcheck(cfg: RunConfig, a: GradcheckArgs) -> Result<bool> {
    let seed = cfg.seed();
    let mut inst = canonical_instance(seed)?;
    if a.envelope {
        inst.config.ot_gradient = OtGradient::Envelope;
    }
    let report = pipeline_gradcheck(&inst, a.probes, a.h, seed)?;
    let (name, index) = report.worst.clone().unwrap_or_default();
    println!(
        "max relative error {:.3e} over {} probes (h = {:e}), worst at {name}[{index}]",
        report.max_rel_error, report.probes, a.h
    );
    if report.max_rel_error <= a.tolerance {
        Ok(true)
    } else {
        eprintln!("gradient check failed: {name} exceeds tolerance {:e}", a.tolerance);
        Ok(false)
    }
}
