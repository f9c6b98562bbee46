//! Subcommand implementations behind the `cmd` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use cmd_core::backbone::ForwardOptions;
use cmd_core::conditioning::ConditionProvider;
use cmd_core::data::{
    load_corpus, make_synthetic_corpus, read_png_image, read_png_mask, sample_fewshot, save_corpus, write_png_image, write_png_mask, write_png_rgb,
    ImagePatch, LabelMap, PatchDataset,
};
use cmd_core::features::{fuse_pyramid, save_pyramid, write_atomic, ExtractionConfig, FeatureExtractor, DEFAULT_T_FIX};
use cmd_core::heads::{pyramids_for, train_head_from_checkpoint, Head, HeadConfig, HeadKind};
use cmd_core::masking::{apply_mask, sample_timestep_mask, TimestepSpec};
use cmd_core::metrics::{evaluate_masks, BinaryMask, EvaluationReport, DEFAULT_BF1_TOL, DEFAULT_RESAMPLES};
use cmd_core::pretrain::{checkpoint_digest, run_pretraining, Checkpoint, PretrainConfig, RunOptions};
use cmd_core::visualize::{kmeans_cluster, render_labels, render_overlay, KMeansConfig, DEFAULT_MAX_ITER};
use cmd_core::{CmdError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable naming the feature cache root.
pub const CACHE_ENV: &str = "CMD_CACHE_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const HEAD_FILE: &str = "head.bin";

#[derive(Debug, Parser)]
#[command(name = "cmd", version, about = "Masked-diffusion pretraining, dense features and segmentation heads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a backbone with the masked-diffusion objective.
    Pretrain(PretrainArgs),
    /// Write a labeled synthetic nuclei corpus.
    MakeSynthetic(SyntheticArgs),
    /// Extract frozen feature pyramids for a directory of images.
    Extract(ExtractArgs),
    /// Train a segmentation head on frozen features.
    TrainHead(TrainHeadArgs),
    /// Predict masks for images.
    Predict(PredictArgs),
    /// Score predictions on a labeled split with bootstrap intervals.
    Evaluate(EvaluateArgs),
    /// Sample a k-shot subset, train a head on it and evaluate.
    Fewshot(FewshotArgs),
    /// K-means cluster map, overlays and an optional reconstruction.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing output directory written by a previous run.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    /// Corpus directory (`images/*.png`); a synthetic corpus is generated when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Size of the generated corpus when `--data` is omitted.
    #[arg(long, default_value_t = 500)]
    pub synthetic_n: usize,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of images written to the `test` split.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Debug, Args, Clone)]
pub struct FeatureArgs {
    /// Denoising timestep at which features are read.
    #[arg(long, default_value_t = DEFAULT_T_FIX)]
    pub t_fix: u32,
    /// Comma-separated decoder blocks to tap.
    #[arg(long, value_delimiter = ',', default_values_t = cmd_core::backbone::DEFAULT_TAPS.to_vec())]
    pub blocks: Vec<usize>,
    /// Do not feed the image-level condition feature.
    #[arg(long)]
    pub no_condition: bool,
    /// Feature cache root (defaults to the `CMD_CACHE_DIR` environment variable).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

impl FeatureArgs {
    fn extraction(&self) -> ExtractionConfig {
        ExtractionConfig { t_fix: self.t_fix, blocks: self.blocks.clone(), use_condition: !self.no_condition }
    }

    fn cache_root(&self) -> Option<PathBuf> {
        cache_root(self.cache_dir.clone())
    }
}

fn cache_root(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus directory (`images/*.png`).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub features: FeatureArgs,
}

#[derive(Debug, Args, Clone)]
pub struct HeadArgs {
    /// TOML head configuration; flags override its values.
    #[arg(long = "head-config")]
    pub head_config: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<HeadKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "head-lr")]
    pub head_lr: Option<f64>,
    #[arg(long = "head-batch-size")]
    pub head_batch_size: Option<usize>,
    #[arg(long = "head-seed")]
    pub head_seed: Option<u64>,
}

impl HeadArgs {
    fn config(&self) -> Result<HeadConfig> {
        let mut cfg = match &self.head_config {
            Some(p) => toml::from_str(&read_text(p)?).map_err(|e| CmdError::config(format!("{}: {e}", p.display())))?,
            None => HeadConfig::default(),
        };
        if let Some(k) = self.kind {
            cfg.kind = k;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = self.head_lr {
            cfg.lr = lr;
        }
        if let Some(b) = self.head_batch_size {
            cfg.batch_size = b;
        }
        if let Some(s) = self.head_seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainHeadArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Labeled training split (`images/` and `masks/`).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub head: HeadArgs,
    #[command(flatten)]
    pub features: FeatureArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    /// A PNG image, or a directory of PNGs (or of `images/*.png`).
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Boundary F1 matching tolerance in pixels.
    #[arg(long = "bf1-tol", default_value_t = DEFAULT_BF1_TOL)]
    pub bf1_tol: f64,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub resamples: usize,
    /// Bootstrap seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write prediction overlays.
    #[arg(long)]
    pub overlays: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Labeled test split (`images/` and `masks/`).
    #[arg(long)]
    pub data: PathBuf,
    /// Score existing `<stem>.png` masks from this directory instead of running a head.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Labeled split the k-shot subset is drawn from.
    #[arg(long)]
    pub train: PathBuf,
    /// Labeled evaluation split.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, short)]
    pub k: usize,
    /// Subset sampling seed.
    #[arg(long, default_value_t = 0)]
    pub sample_seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub head: HeadArgs,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PNG image to inspect.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 4)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    /// Cluster raw rather than L2-normalised feature vectors.
    #[arg(long)]
    pub no_normalize: bool,
    /// Overlay opacity.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Also write the masked input and its reconstruction at this timestep.
    #[arg(long)]
    pub recon_t: Option<u32>,
    #[command(flatten)]
    pub features: FeatureArgs,
}

/// Provenance written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 of the serialised effective configuration.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    fn new(command: &str, config: &impl Serialize, seed: u64) -> Self {
        let config = serde_json::to_value(config).expect("serialisable");
        Self {
            command: command.into(),
            args: std::env::args().collect(),
            config_hash: sha256_hex(config.to_string().as_bytes()),
            config,
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            extra: BTreeMap::new(),
        }
    }

    fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.into(), path.display().to_string());
        self
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(self).expect("serialisable"))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        serde_json::from_str(&read_text(&path)?).map_err(|e| CmdError::format(&path, e.to_string()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CmdError::io(format!("reading {}", path.display()), e))?))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CmdError::io(format!("reading {}", path.display()), e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CmdError::io(format!("creating {}", path.display()), e))
}

/// Make `out` ready for a fresh run. An existing nonempty directory is only
/// replaced with `--force`, and only when it holds a manifest from an
/// earlier run.
fn prepare_out(out: &OutArgs) -> Result<()> {
    let dir = &out.out;
    let nonempty = dir.is_dir() && fs::read_dir(dir).map_err(|e| CmdError::io(format!("reading {}", dir.display()), e))?.next().is_some();
    if nonempty {
        if !out.force {
            return Err(CmdError::config(format!("output directory {} is not empty; pass --force to replace it", dir.display())));
        }
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(CmdError::config(format!("refusing to replace {}: it was not written by this tool", dir.display())));
        }
        fs::remove_dir_all(dir).map_err(|e| CmdError::io(format!("removing {}", dir.display()), e))?;
    } else if dir.exists() && !dir.is_dir() {
        return Err(CmdError::config(format!("{} exists and is not a directory", dir.display())));
    }
    create_dir(dir)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::MakeSynthetic(a) => make_synthetic(a),
        Command::Extract(a) => extract(a),
        Command::TrainHead(a) => train_head_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Fewshot(a) => fewshot(a),
        Command::Visualize(a) => visualize(a),
    }
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg: PretrainConfig = PretrainConfig::from_toml(&read_text(&a.config)?).map_err(|e| CmdError::config(format!("{}: {e}", a.config.display())))?;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.validate()?;
    let dataset = match &a.data {
        Some(dir) => load_corpus(dir, false)?,
        None => make_synthetic_corpus(a.synthetic_n, cfg.model.input_size, cfg.seed)?,
    };
    if a.resume.is_some() {
        // resuming appends to the existing run directory
        create_dir(&a.out.out)?;
    } else {
        prepare_out(&a.out)?;
    }
    let mut manifest = RunManifest::new("pretrain", &cfg, cfg.seed).input("config", &a.config);
    match &a.data {
        Some(d) => manifest = manifest.input("data", d),
        None => {
            manifest.extra.insert("synthetic_n".into(), a.synthetic_n.into());
        }
    }
    if let Some(r) = &a.resume {
        manifest = manifest.input("resume", r);
    }
    let ckpt = run_pretraining(&cfg, &dataset, &a.out.out, RunOptions { resume: a.resume.clone(), on_step: None })?;
    manifest.outputs = vec!["final".into(), cmd_core::pretrain::LOG_FILE.into()];
    manifest.extra.insert("final_step".into(), ckpt.step.into());
    manifest.extra.insert("checkpoint_digest".into(), checkpoint_digest(&a.out.out.join("final"))?.into());
    manifest.write(&a.out.out)
}

fn make_synthetic(a: SyntheticArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(CmdError::config(format!("test fraction must lie in [0, 1), got {}", a.test_fraction)));
    }
    let corpus = make_synthetic_corpus(a.n, a.size, a.seed)?;
    let n_test = (a.n as f64 * a.test_fraction).round() as usize;
    let (train, test) = corpus.split_at(a.n - n_test);
    prepare_out(&a.out)?;
    save_corpus(&train, &a.out.out.join("train"))?;
    let mut outputs = vec!["train".to_string()];
    if !test.is_empty() {
        save_corpus(&test, &a.out.out.join("test"))?;
        outputs.push("test".into());
    }
    #[derive(Serialize)]
    struct Cfg {
        n: usize,
        size: usize,
        seed: u64,
        test_fraction: f64,
    }
    let mut m = RunManifest::new("make-synthetic", &Cfg { n: a.n, size: a.size, seed: a.seed, test_fraction: a.test_fraction }, a.seed);
    m.outputs = outputs;
    m.write(&a.out.out)
}

fn extract(a: ExtractArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let dataset = load_corpus(&a.data, false)?;
    let extractor = FeatureExtractor::from_checkpoint(&ckpt, a.features.extraction())?;
    let images: Vec<ImagePatch> = dataset.images().cloned().collect();
    let pyrs = pyramids_for(&extractor, &images, a.features.cache_root().as_deref())?;
    prepare_out(&a.out)?;
    let key = extractor.cache_key();
    let mut m = RunManifest::new("extract", &a.features.extraction(), 0).input("ckpt", &a.ckpt).input("data", &a.data);
    for (img, p) in images.iter().zip(&pyrs) {
        let name = format!("{}.pyr", img.source_id);
        save_pyramid(&a.out.out.join(&name), p, &key)?;
        m.outputs.push(name);
    }
    m.extra.insert("cache_key".into(), key.into());
    m.extra.insert("checkpoint_digest".into(), checkpoint_digest(&a.ckpt)?.into());
    m.write(&a.out.out)
}

#[derive(Serialize)]
struct HeadRunConfig<'a> {
    head: &'a HeadConfig,
    extraction: ExtractionConfig,
}

fn train_and_save(ckpt_path: &Path, train: &PatchDataset, cfg: &HeadConfig, features: &FeatureArgs, out: &Path) -> Result<(Head, RunManifest)> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (head, log) = train_head_from_checkpoint(&ckpt, train, cfg, features.extraction(), features.cache_root().as_deref())?;
    head.save(&out.join(HEAD_FILE))?;
    write_atomic(&out.join("train_head.json"), &serde_json::to_vec_pretty(&log).expect("serialisable"))?;
    let mut m = RunManifest::new("train-head", &HeadRunConfig { head: cfg, extraction: features.extraction() }, cfg.seed).input("ckpt", ckpt_path);
    m.outputs = vec![HEAD_FILE.into(), "train_head.json".into()];
    m.extra.insert("checkpoint_digest".into(), checkpoint_digest(ckpt_path)?.into());
    m.extra.insert("head_parameters".into(), head.parameter_count().into());
    Ok((head, m))
}

fn train_head_cmd(a: TrainHeadArgs) -> Result<()> {
    let cfg = a.head.config()?;
    let train = load_corpus(&a.data, true)?;
    prepare_out(&a.out)?;
    let (_, m) = train_and_save(&a.ckpt, &train, &cfg, &a.features, &a.out.out)?;
    m.input("data", &a.data).write(&a.out.out)
}

/// Predicted label maps for every image of a dataset.
fn predict_dataset(ckpt: &Checkpoint, head: &Head, images: &[ImagePatch], cache: Option<&Path>) -> Result<Vec<LabelMap>> {
    let extractor = FeatureExtractor::from_checkpoint(ckpt, head.extraction())?;
    let pyrs = pyramids_for(&extractor, images, cache)?;
    let mut out = Vec::with_capacity(images.len());
    for (img, p) in images.iter().zip(pyrs) {
        if img.height() != img.width() {
            return Err(CmdError::Size { what: "image".into(), expected: "a square patch".into(), got: format!("{}x{}", img.height(), img.width()) });
        }
        out.extend(head.predict(std::slice::from_ref(&p), img.height())?);
    }
    Ok(out)
}

fn input_images(input: &Path) -> Result<Vec<ImagePatch>> {
    if input.is_file() {
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![read_png_image(input, &stem)?]);
    }
    let root = if input.join("images").is_dir() { input.to_path_buf() } else { input.parent().map(Path::to_path_buf).unwrap_or_default() };
    if input.join("images").is_dir() {
        return Ok(load_corpus(&root, false)?.images().cloned().collect());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| CmdError::io(format!("reading {}", input.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    files.iter().map(|p| read_png_image(p, &p.file_stem().unwrap_or_default().to_string_lossy())).collect()
}

fn predict(a: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let head = Head::load(&a.head)?;
    let images = input_images(&a.input)?;
    if images.is_empty() {
        return Err(CmdError::domain(format!("no PNG images under {}", a.input.display())));
    }
    let preds = predict_dataset(&ckpt, &head, &images, cache_root(a.cache_dir.clone()).as_deref())?;
    prepare_out(&a.out)?;
    let mut m = RunManifest::new("predict", &head.config, head.config.seed).input("ckpt", &a.ckpt).input("head", &a.head).input("input", &a.input);
    for (img, p) in images.iter().zip(&preds) {
        let name = format!("{}.png", img.source_id);
        write_png_mask(&a.out.out.join(&name), p)?;
        m.outputs.push(name);
    }
    m.write(&a.out.out)
}

#[derive(Serialize)]
struct EvalRunConfig {
    bf1_tol: f64,
    resamples: usize,
    seed: u64,
}

/// Score predictions against a labeled split and write the report and,
/// optionally, overlays.
fn score_and_write(test: &PatchDataset, preds: &[LabelMap], eval: &EvalArgs, out: &Path, provenance: BTreeMap<String, String>) -> Result<EvaluationReport> {
    let samples = test.labeled()?;
    let pairs = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| Ok((s.image.source_id.clone(), BinaryMask::foreground(p), BinaryMask::foreground(&s.mask))))
        .collect::<Result<Vec<_>>>()?;
    let mut report = evaluate_masks(&pairs, eval.bf1_tol, eval.resamples, eval.seed)?;
    report.provenance = provenance;
    write_atomic(&out.join(REPORT_FILE), &serde_json::to_vec_pretty(&report).expect("serialisable"))?;
    if eval.overlays {
        let dir = out.join("overlays");
        create_dir(&dir)?;
        for (s, p) in samples.iter().zip(preds) {
            let rgb = render_overlay(&s.image, &p.labels, 0.5, true)?;
            write_png_rgb(&dir.join(format!("{}.png", s.image.source_id)), s.image.width(), s.image.height(), &rgb)?;
        }
    }
    Ok(report)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let test = load_corpus(&a.data, true)?;
    if test.is_empty() {
        return Err(CmdError::domain(format!("no labeled images under {}", a.data.display())));
    }
    let mut provenance = BTreeMap::new();
    provenance.insert("bf1_tolerance".into(), a.eval.bf1_tol.to_string());
    provenance.insert("data".into(), a.data.display().to_string());
    let preds = match &a.predictions {
        Some(dir) => {
            provenance.insert("predictions".into(), dir.display().to_string());
            test.images().map(|img| read_png_mask(&dir.join(format!("{}.png", img.source_id)))).collect::<Result<Vec<_>>>()?
        }
        None => {
            let (ckpt_path, head_path) = match (&a.ckpt, &a.head) {
                (Some(c), Some(h)) => (c, h),
                _ => return Err(CmdError::config("evaluate needs --ckpt and --head, or --predictions")),
            };
            let ckpt = Checkpoint::load(ckpt_path)?;
            let head = Head::load(head_path)?;
            provenance.insert("checkpoint_digest".into(), checkpoint_digest(ckpt_path)?);
            provenance.insert("head_file".into(), head_path.display().to_string());
            provenance.insert("head_digest".into(), file_digest(head_path)?);
            let images: Vec<ImagePatch> = test.images().cloned().collect();
            predict_dataset(&ckpt, &head, &images, cache_root(a.cache_dir.clone()).as_deref())?
        }
    };
    prepare_out(&a.out)?;
    score_and_write(&test, &preds, &a.eval, &a.out.out, provenance)?;
    let mut m = RunManifest::new("evaluate", &EvalRunConfig { bf1_tol: a.eval.bf1_tol, resamples: a.eval.resamples, seed: a.eval.seed }, a.eval.seed).input("data", &a.data);
    for (name, p) in [("ckpt", &a.ckpt), ("head", &a.head), ("predictions", &a.predictions)] {
        if let Some(p) = p {
            m = m.input(name, p);
        }
    }
    m.outputs = vec![REPORT_FILE.into()];
    m.write(&a.out.out)
}

/// Order-independent digest of a subset's image ids.
pub fn subset_hash(ds: &PatchDataset) -> String {
    let mut ids: Vec<&str> = ds.images().map(|i| i.source_id.as_str()).collect();
    ids.sort_unstable();
    sha256_hex(ids.join("\n").as_bytes())
}

fn fewshot(a: FewshotArgs) -> Result<()> {
    if a.k == 0 {
        return Err(CmdError::config("k must be >= 1"));
    }
    let cfg = a.head.config()?;
    let pool = load_corpus(&a.train, true)?;
    let subset = sample_fewshot(&pool, a.k, a.sample_seed)?;
    let test = load_corpus(&a.test, true)?;
    if test.is_empty() {
        return Err(CmdError::domain(format!("no labeled images under {}", a.test.display())));
    }
    prepare_out(&a.out)?;
    let (head, mut m) = train_and_save(&a.ckpt, &subset, &cfg, &a.features, &a.out.out)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let images: Vec<ImagePatch> = test.images().cloned().collect();
    let preds = predict_dataset(&ckpt, &head, &images, a.features.cache_root().as_deref())?;
    let mut provenance = BTreeMap::new();
    provenance.insert("bf1_tolerance".into(), a.eval.bf1_tol.to_string());
    provenance.insert("checkpoint_digest".into(), checkpoint_digest(&a.ckpt)?);
    provenance.insert("head_digest".into(), file_digest(&a.out.out.join(HEAD_FILE))?);
    provenance.insert("k".into(), a.k.to_string());
    score_and_write(&test, &preds, &a.eval, &a.out.out, provenance)?;
    m.command = "fewshot".into();
    m = m.input("train", &a.train).input("test", &a.test);
    m.outputs.push(REPORT_FILE.into());
    m.extra.insert("k".into(), a.k.into());
    m.extra.insert("sample_seed".into(), a.sample_seed.into());
    m.extra.insert("subset".into(), subset.images().map(|i| i.source_id.clone()).collect::<Vec<_>>().into());
    m.extra.insert("subset_hash".into(), subset_hash(&subset).into());
    m.write(&a.out.out)
}

fn visualize(a: VisualizeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let stem = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let img = read_png_image(&a.input, &stem)?;
    let extractor = FeatureExtractor::from_checkpoint(&ckpt, a.features.extraction())?;
    let pyr = extractor.extract(&img)?;
    let (h, w) = (img.height(), img.width());
    if h != w {
        return Err(CmdError::Size { what: "image".into(), expected: "a square patch".into(), got: format!("{h}x{w}") });
    }
    let dense = fuse_pyramid(&pyr, h)?;
    let kcfg = KMeansConfig { k: a.clusters, seed: a.seed, max_iter: a.max_iter, normalize: !a.no_normalize };
    let clusters = kmeans_cluster(&dense, &kcfg)?;
    prepare_out(&a.out)?;
    let out = &a.out.out;
    write_png_rgb(&out.join("clusters.png"), w, h, &render_labels(&clusters.labels))?;
    write_png_rgb(&out.join("overlay.png"), w, h, &render_overlay(&img, &clusters.labels, a.alpha, false)?)?;
    write_atomic(&out.join("clusters.json"), &serde_json::to_vec_pretty(&clusters).expect("serialisable"))?;
    let mut outputs = vec!["clusters.png".to_string(), "overlay.png".into(), "clusters.json".into()];
    if let Some(t) = a.recon_t {
        let cfg = &ckpt.config;
        let spec = TimestepSpec::new(t, cfg.timesteps)?;
        let mut rng = cmd_core::pretrain::step_rng(a.seed, 0);
        let grid = sample_timestep_mask(h, w, cfg.patch_size, spec, &mut rng)?;
        let masked = apply_mask(&img, &grid)?;
        let model = ckpt.ema_model()?;
        // the condition comes from the clean image, as during training
        let z = ConditionProvider::new(&cfg.condition)?.encode_batch(std::slice::from_ref(&img))?;
        let y = model.forward(&masked.to_batch(), &[t], z.as_ref(), &ForwardOptions::default())?;
        let recon = y.recon.ok_or_else(|| CmdError::domain("model produced no reconstruction"))?;
        write_png_image(&out.join("masked.png"), &masked)?;
        write_png_image(&out.join("recon.png"), &ImagePatch::from_batch(&recon, 0, stem.clone())?)?;
        outputs.extend(["masked.png".to_string(), "recon.png".into()]);
    }
    #[derive(Serialize)]
    struct Cfg {
        clusters: usize,
        seed: u64,
        max_iter: usize,
        normalize: bool,
        alpha: f64,
        recon_t: Option<u32>,
        extraction: ExtractionConfig,
    }
    let vcfg = Cfg { clusters: a.clusters, seed: a.seed, max_iter: a.max_iter, normalize: !a.no_normalize, alpha: a.alpha, recon_t: a.recon_t, extraction: a.features.extraction() };
    let mut m = RunManifest::new("visualize", &vcfg, a.seed).input("ckpt", &a.ckpt).input("input", &a.input);
    m.outputs = outputs;
    m.extra.insert("inertia".into(), clusters.inertia.into());
    m.write(out)
}
