//! Masked-diffusion pretraining: per-sample timestep and mask sampling,
//! AdamW updates, EMA tracking, checkpointing and resumption.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use cmd_autograd::{AdamW, AdamWConfig, Graph, ParamStore, Precision, Real, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{build_model, forward_graph, ForwardOptions, Model, ModelConfig};
use crate::conditioning::{ConditionProvider, ConditionSource};
use crate::data::{batch_images, mixed_resize, ImagePatch, PatchDataset};
use crate::error::{CmdError, Result};
use crate::masking::{apply_mask_batch, sample_timestep_mask, TimestepSpec};
use crate::objective::{total_loss_graph, LossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionMode {
    /// Full single precision; bit-reproducible.
    #[default]
    High,
    /// bfloat16-rounded matrix-product operands.
    Mixed,
}

impl From<PrecisionMode> for Precision {
    fn from(p: PrecisionMode) -> Self {
        match p {
            PrecisionMode::High => Precision::High,
            PrecisionMode::Mixed => Precision::Mixed,
        }
    }
}

/// A model given either as a preset name or as a full table.
fn model_spec<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ModelConfig, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Spec {
        Preset(String),
        Full(ModelConfig),
    }
    match Spec::deserialize(d)? {
        Spec::Preset(name) => ModelConfig::preset(&name).map_err(serde::de::Error::custom),
        Spec::Full(cfg) => Ok(cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(deserialize_with = "model_spec")]
    pub model: ModelConfig,
    /// Diffusion horizon `T`.
    #[serde(alias = "T")]
    pub timesteps: u32,
    pub patch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub condition: ConditionSource,
    pub precision: PrecisionMode,
    pub checkpoint_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::cmd_b(),
            timesteps: 1000,
            patch_size: 8,
            lr: 3e-5,
            weight_decay: 0.0,
            ema_decay: 0.9999,
            steps: 80_000,
            batch_size: 8,
            seed: 0,
            loss: LossConfig::default(),
            condition: ConditionSource::default(),
            precision: PrecisionMode::High,
            checkpoint_every: 5_000,
        }
    }
}

impl PretrainConfig {
    /// Desk-scale settings for the tiny model on 64x64 inputs.
    pub fn tiny() -> Self {
        Self { model: ModelConfig::tiny(), patch_size: 4, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CmdError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.weights.validate()?;
        let bad = |m: String| Err(CmdError::config(m));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if self.timesteps == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return bad("timesteps, batch_size and checkpoint_every must be >= 1".into());
        }
        if self.patch_size == 0 || !self.model.input_size.is_multiple_of(self.patch_size) {
            return bad(format!("patch_size {} does not divide input_size {}", self.patch_size, self.model.input_size));
        }
        if self.condition.provider != crate::conditioning::ProviderKind::None && self.condition.feature_dim != self.model.feature_dim {
            return bad(format!("condition feature_dim {} differs from model feature_dim {}", self.condition.feature_dim, self.model.feature_dim));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// `ema <- decay * ema + (1 - decay) * weights`, elementwise. Evaluated as
/// `ema + (1 - decay) * (weights - ema)` so that an EMA equal to the weights
/// stays bit-identical.
pub fn ema_update<T: Real>(ema: &mut ParamStore<T>, weights: &ParamStore<T>, decay: f64) -> Result<()> {
    ema.check_layout(weights)?;
    let rest = T::lit(1.0 - decay);
    for id in 0..ema.len() {
        let w = weights.get(id).data();
        for (e, &v) in ema.get_mut(id).data_mut().iter_mut().zip(w) {
            *e = *e + rest * (v - *e);
        }
    }
    Ok(())
}

/// Uniform timestep in `[1, total]`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, total: u32) -> u32 {
    rng.random_range(1..=total)
}

/// Generator for optimisation step `step` (1-based); a pure function of
/// `(seed, step)` so that resumed runs replay the same draws.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Epoch-wise shuffled sample order.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, cached: None }
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xA5A5_5A5A_0F0F_F0F0);
            rng.set_stream(epoch);
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut rng);
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    /// Dataset indices of batch `batch` (0-based).
    pub fn indices(&mut self, batch: u64, batch_size: usize) -> Vec<usize> {
        (0..batch_size as u64)
            .map(|i| {
                let k = batch * batch_size as u64 + i;
                let pos = (k % self.n as u64) as usize;
                self.permutation(k / self.n as u64)[pos]
            })
            .collect()
    }
}

/// Optimiser moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

/// A training snapshot. Self-describing: the configuration inside is enough
/// to rebuild the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: PretrainConfig,
    pub weights: ParamStore<f32>,
    pub ema: Option<ParamStore<f32>>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    version: u32,
    step: u64,
    config: PretrainConfig,
    tensors: Vec<TensorMeta>,
    /// File name to SHA-256 of its contents.
    files: Vec<(String, String)>,
    optimizer_step: Option<u64>,
}

const CHECKPOINT_FORMAT: &str = "cmd-checkpoint";
const META_FILE: &str = "checkpoint.json";

fn write_f32s<'a>(path: &Path, tensors: impl Iterator<Item = &'a Tensor<f32>>) -> Result<String> {
    let io = |e| CmdError::io(format!("writing {}", path.display()), e);
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let mut hasher = Sha256::new();
    for t in tensors {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        hasher.update(&bytes);
        w.write_all(&bytes).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(hex::encode(hasher.finalize()))
}

fn read_f32s(path: &Path, shapes: &[TensorMeta]) -> Result<Vec<Tensor<f32>>> {
    let io = |e| CmdError::io(format!("reading {}", path.display()), e);
    let mut bytes = Vec::new();
    File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
    let total: usize = shapes.iter().map(|m| m.shape.iter().product::<usize>()).sum();
    if bytes.len() != 4 * total {
        return Err(CmdError::format(path, format!("expected {} bytes, found {}", 4 * total, bytes.len())));
    }
    let mut values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    shapes
        .iter()
        .map(|m| {
            let n = m.shape.iter().product();
            Ok(Tensor::from_vec(&m.shape, values.by_ref().take(n).collect())?)
        })
        .collect()
}

fn store_from(meta: &[TensorMeta], tensors: Vec<Tensor<f32>>) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    for (m, t) in meta.iter().zip(tensors) {
        store.add(m.name.clone(), t);
    }
    store
}

impl Checkpoint {
    /// Write into `dir` (created if needed). The directory is assembled under
    /// a temporary name and renamed into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| CmdError::io(format!("clearing {}", tmp.display()), e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| CmdError::io(format!("creating {}", tmp.display()), e))?;
        let mut files = vec![("weights.bin".to_string(), write_f32s(&tmp.join("weights.bin"), self.weights.iter().map(|e| &e.value))?)];
        if let Some(ema) = &self.ema {
            ema.check_layout(&self.weights)?;
            files.push(("ema.bin".into(), write_f32s(&tmp.join("ema.bin"), ema.iter().map(|e| &e.value))?));
        }
        if let Some(opt) = &self.optimizer {
            files.push(("optim.bin".into(), write_f32s(&tmp.join("optim.bin"), opt.m.iter().chain(&opt.v))?));
        }
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            step: self.step,
            config: self.config.clone(),
            tensors: self.weights.iter().map(|e| TensorMeta { name: e.name.clone(), shape: e.value.shape().to_vec() }).collect(),
            files,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_string_pretty(&meta).expect("checkpoint metadata serialises");
        fs::write(tmp.join(META_FILE), json).map_err(|e| CmdError::io(format!("writing {}", tmp.display()), e))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| CmdError::io(format!("replacing {}", dir.display()), e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| CmdError::io(format!("renaming into {}", dir.display()), e))
    }

    /// Load from a checkpoint directory, or from a run directory holding a
    /// `final` checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let dir = resolve_checkpoint_dir(path)?;
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| CmdError::io(format!("reading {}", meta_path.display()), e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| CmdError::format(&meta_path, e.to_string()))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(CmdError::format(&meta_path, format!("not a checkpoint (format `{}`)", meta.format)));
        }
        let has = |f: &str| meta.files.iter().any(|(n, _)| n == f);
        let weights = store_from(&meta.tensors, read_f32s(&dir.join("weights.bin"), &meta.tensors)?);
        let ema = if has("ema.bin") { Some(store_from(&meta.tensors, read_f32s(&dir.join("ema.bin"), &meta.tensors)?)) } else { None };
        let optimizer = if has("optim.bin") {
            let doubled: Vec<TensorMeta> = meta.tensors.iter().chain(&meta.tensors).map(|m| TensorMeta { name: m.name.clone(), shape: m.shape.clone() }).collect();
            let mut all = read_f32s(&dir.join("optim.bin"), &doubled)?;
            let v = all.split_off(meta.tensors.len());
            Some(OptimizerState { step: meta.optimizer_step.unwrap_or(meta.step), m: all, v })
        } else {
            None
        };
        let ckpt = Self { step: meta.step, config: meta.config, weights, ema, optimizer };
        Model::from_params(&ckpt.config.model, ckpt.weights.clone())?;
        Ok(ckpt)
    }

    /// Network with the EMA weights, the deployed model for downstream use.
    pub fn ema_model(&self) -> Result<Model> {
        let ema = self.ema.clone().ok_or_else(|| CmdError::config("checkpoint has no EMA weights"))?;
        Model::from_params(&self.config.model, ema)
    }

    /// Network with the raw training weights.
    pub fn model(&self) -> Result<Model> {
        Model::from_params(&self.config.model, self.weights.clone())
    }
}

fn resolve_checkpoint_dir(path: &Path) -> Result<PathBuf> {
    if path.join(META_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    if path.join("final").join(META_FILE).is_file() {
        return Ok(path.join("final"));
    }
    Err(CmdError::config(format!("{} is not a checkpoint directory", path.display())))
}

/// SHA-256 of a checkpoint's metadata file, which in turn records digests
/// of every tensor file.
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    let meta = resolve_checkpoint_dir(path)?.join(META_FILE);
    let bytes = fs::read(&meta).map_err(|e| CmdError::io(format!("reading {}", meta.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Training state: live weights, EMA, optimiser and frozen provider.
pub struct Trainer {
    pub config: PretrainConfig,
    pub model: Model,
    pub ema: ParamStore<f32>,
    optimizer: AdamW<f32>,
    provider: ConditionProvider,
    step: u64,
}

impl Trainer {
    pub fn new(config: &PretrainConfig) -> Result<Self> {
        config.validate()?;
        let model = build_model(&config.model, config.seed)?;
        let ema = model.params.clone();
        let optimizer = AdamW::new(&model.params, config.adamw());
        let provider = ConditionProvider::new(&config.condition)?;
        Ok(Self { config: config.clone(), model, ema, optimizer, provider, step: 0 })
    }

    /// Continue from `ckpt` under `config`, whose model must match.
    pub fn resume(config: &PretrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.config.model != config.model {
            return Err(CmdError::config("checkpoint model differs from the run configuration"));
        }
        let model = Model::from_params(&config.model, ckpt.weights)?;
        let ema = ckpt.ema.ok_or_else(|| CmdError::config("checkpoint has no EMA weights to resume from"))?;
        let opt = ckpt.optimizer.ok_or_else(|| CmdError::config("checkpoint has no optimizer state to resume from"))?;
        let optimizer = AdamW::from_state(config.adamw(), opt.step, opt.m, opt.v)?;
        let provider = ConditionProvider::new(&config.condition)?;
        Ok(Self { config: config.clone(), model, ema, optimizer, provider, step: ckpt.step })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn provider(&self) -> &ConditionProvider {
        &self.provider
    }

    /// One optimisation step on `batch` (clean images at the model input
    /// size); returns the batch loss.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[ImagePatch], rng: &mut R) -> Result<f64> {
        let cfg = &self.config;
        let size = cfg.model.input_size;
        if batch.is_empty() {
            return Err(CmdError::domain("empty batch"));
        }
        if let Some(bad) = batch.iter().find(|b| b.height() != size || b.width() != size) {
            return Err(CmdError::Size { what: format!("`{}`", bad.source_id), expected: format!("{size}x{size}"), got: format!("{}x{}", bad.height(), bad.width()) });
        }
        let x0 = batch_images(batch)?;
        let mut timesteps = Vec::with_capacity(batch.len());
        let mut grids = Vec::with_capacity(batch.len());
        for _ in batch {
            let t = sample_timestep(rng, cfg.timesteps);
            timesteps.push(t);
            grids.push(sample_timestep_mask(size, size, cfg.patch_size, TimestepSpec::new(t, cfg.timesteps)?, rng)?);
        }
        let x_t = apply_mask_batch(&x0, &grids)?;
        let z = self.provider.encode_batch(batch)?;
        let l1_weight = if cfg.loss.masked_only {
            let c = cfg.model.in_channels;
            let data = grids.iter().flat_map(|g| g.pixel_mask()).flat_map(|v| std::iter::repeat_n(1.0 - v, c)).collect();
            Some(Tensor::from_vec(x0.shape(), data)?)
        } else {
            None
        };

        let grads = {
            let mut g = Graph::with_params(&self.model.params);
            g.set_precision(cfg.precision.into());
            let x = g.input(x_t);
            let out = forward_graph(&mut g, &cfg.model, &self.model.layout, x, &timesteps, z.as_ref(), &ForwardOptions::default())?;
            let recon = out.recon.expect("full forward");
            let loss = total_loss_graph(&mut g, recon, &x0, cfg.loss.weights, cfg.loss.window.into(), l1_weight.as_ref())?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(CmdError::NonFinite { step: self.step + 1, detail: format!("loss {value} at timesteps {timesteps:?}") });
            }
            (g.backward(loss)?.dense(&self.model.params), value)
        };
        let (grads, value) = grads;
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(CmdError::NonFinite { step: self.step + 1, detail: format!("gradient of `{}`", self.model.params.name(i)) });
        }
        self.optimizer.update(&mut self.model.params, &grads, cfg.lr)?;
        ema_update(&mut self.ema, &self.model.params, cfg.ema_decay)?;
        self.step += 1;
        Ok(value)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (m, v) = self.optimizer.moments();
        Checkpoint {
            step: self.step,
            config: self.config.clone(),
            weights: self.model.params.clone(),
            ema: Some(self.ema.clone()),
            optimizer: Some(OptimizerState { step: self.optimizer.step_count(), m: m.to_vec(), v: v.to_vec() }),
        }
    }
}

/// Hooks for [`run_pretraining`].
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Checkpoint directory to continue from.
    pub resume: Option<PathBuf>,
    /// Called after every step with `(step, loss)`.
    pub on_step: Option<&'a mut dyn FnMut(u64, f64)>,
}

pub const LOG_FILE: &str = "train.log";

fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join(format!("ckpt_{step}"))
}

/// Read `step<TAB>loss` lines.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, f64)>> {
    let file = File::open(path).map_err(|e| CmdError::io(format!("opening {}", path.display()), e))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| CmdError::io(format!("reading {}", path.display()), e))?;
            let (s, l) = line.split_once('\t').ok_or_else(|| CmdError::format(path, format!("bad log line `{line}`")))?;
            let parse_err = |_| CmdError::format(path, format!("bad log line `{line}`"));
            Ok((s.parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?, l.parse().map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?))
        })
        .collect()
}

/// Train for `cfg.steps` steps on `dataset` with mixed-resize augmentation,
/// writing `out/ckpt_<step>` every `cfg.checkpoint_every` steps, a final
/// checkpoint in `out/final`, and `out/train.log`.
pub fn run_pretraining(cfg: &PretrainConfig, dataset: &PatchDataset, out: &Path, mut opts: RunOptions<'_>) -> Result<Checkpoint> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(CmdError::domain("pretraining dataset is empty"));
    }
    let size = cfg.model.input_size;
    if let Some(img) = dataset.images().find(|i| i.height() < size || i.width() < size) {
        return Err(CmdError::Size { what: format!("`{}`", img.source_id), expected: format!("sides >= {size}"), got: format!("{}x{}", img.height(), img.width()) });
    }
    fs::create_dir_all(out).map_err(|e| CmdError::io(format!("creating {}", out.display()), e))?;
    let log_path = out.join(LOG_FILE);

    let mut trainer = match &opts.resume {
        Some(path) => Trainer::resume(cfg, Checkpoint::load(path)?)?,
        None => Trainer::new(cfg)?,
    };
    let start = trainer.step();
    if start > cfg.steps {
        return Err(CmdError::config(format!("checkpoint step {start} is beyond the configured {} steps", cfg.steps)));
    }
    let kept: Vec<(u64, f64)> = if start > 0 && log_path.exists() { read_loss_log(&log_path)?.into_iter().filter(|(s, _)| *s <= start).collect() } else { Vec::new() };
    let io = |e| CmdError::io(format!("writing {}", log_path.display()), e);
    let mut log = BufWriter::new(File::create(&log_path).map_err(io)?);
    for (s, l) in &kept {
        writeln!(log, "{s}\t{l}").map_err(io)?;
    }

    let images: Vec<&ImagePatch> = dataset.images().collect();
    let mut sampler = BatchSampler::new(images.len(), cfg.seed);
    for step in start + 1..=cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let batch = sampler
            .indices(step - 1, cfg.batch_size)
            .into_iter()
            .map(|i| mixed_resize(images[i], size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let loss = trainer.train_step(&batch, &mut rng)?;
        writeln!(log, "{step}\t{loss}").map_err(io)?;
        if let Some(cb) = opts.on_step.as_mut() {
            cb(step, loss);
        }
        if step % cfg.checkpoint_every == 0 {
            log.flush().map_err(io)?;
            trainer.checkpoint().save(&checkpoint_dir(out, step))?;
        }
    }
    log.flush().map_err(io)?;
    let ckpt = trainer.checkpoint();
    ckpt.save(&out.join("final"))?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_boundaries() {
        let mut w = ParamStore::<f64>::new();
        w.add("a", Tensor::from_fn(&[4], |i| i as f64));
        let mut e = ParamStore::<f64>::new();
        e.add("a", Tensor::full(&[4], 7.0));
        let start = e.clone();
        ema_update(&mut e, &w, 1.0).unwrap();
        assert_eq!(e, start);
        ema_update(&mut e, &w, 0.0).unwrap();
        assert_eq!(e, w);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 3);
        let mut first: Vec<usize> = (0..5).flat_map(|b| s.indices(b, 2)).collect();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let mut again = BatchSampler::new(10, 3);
        assert_eq!(again.indices(7, 3), s.indices(7, 3));
    }

    #[test]
    fn omitted_keys_take_defaults() {
        let cfg = PretrainConfig::from_toml("model = \"tiny\"\npatch_size = 4\nsteps = 10\n").unwrap();
        assert_eq!((cfg.timesteps, cfg.lr, cfg.ema_decay, cfg.weight_decay), (1000, 3e-5, 0.9999, 0.0));
        assert_eq!(PretrainConfig::from_toml("").unwrap().patch_size, 8);
        assert!(PretrainConfig::from_toml("steps = \"many\"").is_err());
        assert!(PretrainConfig::from_toml("bogus = 1").is_err());
    }
}
