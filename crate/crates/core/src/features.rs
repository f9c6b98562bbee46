//! Frozen dense features: multi-scale decoder activations of a clean image
//! at a fixed timestep, their fusion to one map, and an on-disk cache.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use cmd_autograd::{resize_bilinear, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ForwardOptions, Model, DEFAULT_TAPS};
use crate::conditioning::{ConditionProvider, ConditionSource};
use crate::data::{batch_images, ImagePatch};
use crate::error::{CmdError, Result};
use crate::pretrain::Checkpoint;

pub const DEFAULT_T_FIX: u32 = 50;

/// Tapped activations of one image, each `[h, w, c]`, in increasing block
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub entries: Vec<(usize, Tensor<f32>)>,
    pub t_fix: u32,
}

impl FeaturePyramid {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(CmdError::domain("empty feature pyramid"));
        }
        if self.entries.windows(2).any(|w| w[0].0 >= w[1].0) || self.entries.iter().any(|(b, _)| *b == 0 || *b > 10) {
            return Err(CmdError::domain("pyramid block indices must be strictly increasing within [1, 10]"));
        }
        for (b, t) in &self.entries {
            if t.rank() != 3 {
                return Err(CmdError::Size { what: format!("pyramid entry {b}"), expected: "[h, w, c]".into(), got: format!("{:?}", t.shape()) });
            }
            if !t.all_finite() {
                return Err(CmdError::NonFinite { step: 0, detail: format!("pyramid entry {b}") });
            }
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<usize> {
        self.entries.iter().map(|(b, _)| *b).collect()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.entries.iter().map(|(_, t)| t.last_dim()).collect()
    }

    pub fn total_width(&self) -> usize {
        self.widths().iter().sum()
    }

    /// Side lengths of the finest entry.
    pub fn finest(&self) -> (usize, usize) {
        self.entries.iter().map(|(_, t)| (t.shape()[0], t.shape()[1])).max().unwrap_or((0, 0))
    }
}

/// Pyramid entries resized to a common resolution and concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap {
    /// `[h, w, C_in]`.
    pub values: Tensor<f32>,
    pub blocks: Vec<usize>,
}

/// Bilinearly resize every entry to `target x target` and concatenate along
/// channels in block order.
pub fn fuse_pyramid(pyr: &FeaturePyramid, target: usize) -> Result<DenseFeatureMap> {
    if pyr.entries.is_empty() {
        return Err(CmdError::domain("cannot fuse an empty pyramid"));
    }
    let resized: Vec<Tensor<f32>> = pyr
        .entries
        .iter()
        .map(|(_, t)| {
            let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let batch = t.clone().reshape(&[1, h, w, c])?;
            Ok(resize_bilinear(&batch, target, target)?)
        })
        .collect::<Result<_>>()?;
    let total: usize = resized.iter().map(Tensor::last_dim).sum();
    let mut out = Vec::with_capacity(target * target * total);
    for p in 0..target * target {
        for r in &resized {
            let c = r.last_dim();
            out.extend_from_slice(&r.data()[p * c..(p + 1) * c]);
        }
    }
    Ok(DenseFeatureMap { values: Tensor::from_vec(&[target, target, total], out)?, blocks: pyr.blocks() })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub t_fix: u32,
    pub blocks: Vec<usize>,
    /// Feed the frozen image-level feature at extraction time.
    pub use_condition: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { t_fix: DEFAULT_T_FIX, blocks: DEFAULT_TAPS.to_vec(), use_condition: true }
    }
}

/// A frozen network prepared for feature extraction.
pub struct FeatureExtractor {
    model: Model,
    provider: ConditionProvider,
    config: ExtractionConfig,
    /// Identifies the weights for cache keys.
    weights_id: String,
}

impl FeatureExtractor {
    pub fn new(model: Model, condition: &ConditionSource, config: ExtractionConfig, weights_id: impl Into<String>) -> Result<Self> {
        model.config.tap_widths(&config.blocks)?;
        if config.blocks.is_empty() {
            return Err(CmdError::domain("no decoder blocks requested"));
        }
        let source = if config.use_condition { condition.clone() } else { ConditionSource::none() };
        Ok(Self { provider: ConditionProvider::new(&source)?, model, config, weights_id: weights_id.into() })
    }

    /// Extractor over the EMA weights of `ckpt`.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: ExtractionConfig) -> Result<Self> {
        let id = weights_digest(ckpt.ema.as_ref().ok_or_else(|| CmdError::config("checkpoint has no EMA weights"))?);
        Self::new(ckpt.ema_model()?, &ckpt.config.condition, config, id)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &ExtractionConfig {
        &self.config
    }

    /// Digest of (weights, timestep, blocks, condition) naming cache entries.
    pub fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.weights_id.as_bytes());
        h.update(serde_json::to_vec(&self.config).expect("serialisable"));
        h.update(serde_json::to_vec(self.provider.source()).expect("serialisable"));
        hex::encode(h.finalize())
    }

    /// Pyramids of a batch of clean images, one forward pass.
    pub fn extract_batch(&self, images: &[ImagePatch]) -> Result<Vec<FeaturePyramid>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = batch_images(images)?;
        let z = self.provider.encode_batch(images)?;
        let timesteps = vec![self.config.t_fix; images.len()];
        let opts = ForwardOptions { taps: self.config.blocks.clone(), trace_blocks: false, taps_only: true };
        let out = self.model.forward(&x, &timesteps, z.as_ref(), &opts)?;
        (0..images.len())
            .map(|i| {
                let entries = out
                    .taps
                    .iter()
                    .map(|(b, t)| {
                        let (_, h, w, c) = t.dims4()?;
                        Ok((*b, t.sample(i).reshape(&[h, w, c])?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let pyr = FeaturePyramid { entries, t_fix: self.config.t_fix };
                pyr.validate()?;
                Ok(pyr)
            })
            .collect()
    }

    pub fn extract(&self, img: &ImagePatch) -> Result<FeaturePyramid> {
        Ok(self.extract_batch(std::slice::from_ref(img))?.remove(0))
    }
}

/// SHA-256 over raw little-endian weights.
pub fn weights_digest(params: &cmd_autograd::ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for e in params.iter() {
        h.update(e.name.as_bytes());
        for v in e.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// One-shot extraction from a checkpoint's EMA weights.
pub fn extract_pyramid(ckpt: &Checkpoint, img: &ImagePatch, t_fix: u32, blocks: &[usize], use_condition: bool) -> Result<FeaturePyramid> {
    let cfg = ExtractionConfig { t_fix, blocks: blocks.to_vec(), use_condition };
    FeatureExtractor::from_checkpoint(ckpt, cfg)?.extract(img)
}

#[derive(Debug, Serialize, Deserialize)]
struct PyramidHeader {
    format: String,
    key: String,
    t_fix: u32,
    blocks: Vec<usize>,
    shapes: Vec<Vec<usize>>,
}

const PYRAMID_FORMAT: &str = "cmd-pyramid-v1";

/// Write a pyramid as one JSON header line followed by little-endian `f32`
/// values of each entry in order.
pub fn save_pyramid(path: &Path, pyr: &FeaturePyramid, key: &str) -> Result<()> {
    let header = PyramidHeader {
        format: PYRAMID_FORMAT.into(),
        key: key.into(),
        t_fix: pyr.t_fix,
        blocks: pyr.blocks(),
        shapes: pyr.entries.iter().map(|(_, t)| t.shape().to_vec()).collect(),
    };
    let mut bytes = serde_json::to_vec(&header).expect("serialisable");
    bytes.push(b'\n');
    for (_, t) in &pyr.entries {
        bytes.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    write_atomic(path, &bytes)
}

/// Read a pyramid, checking it was produced under `key` when given.
pub fn load_pyramid(path: &Path, key: Option<&str>) -> Result<FeaturePyramid> {
    let file = fs::File::open(path).map_err(|e| CmdError::io(format!("opening {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| CmdError::io(format!("reading {}", path.display()), e))?;
    let header: PyramidHeader = serde_json::from_str(line.trim_end()).map_err(|e| CmdError::format(path, e.to_string()))?;
    if header.format != PYRAMID_FORMAT || header.blocks.len() != header.shapes.len() {
        return Err(CmdError::format(path, "not a feature pyramid file"));
    }
    if let Some(k) = key {
        if header.key != k {
            return Err(CmdError::format(path, "cache entry was produced by different weights or settings"));
        }
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| CmdError::io(format!("reading {}", path.display()), e))?;
    let total: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if payload.len() != 4 * total {
        return Err(CmdError::format(path, format!("payload has {} bytes, expected {}", payload.len(), 4 * total)));
    }
    let mut values = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let entries = header
        .blocks
        .iter()
        .zip(&header.shapes)
        .map(|(&b, s)| Ok((b, Tensor::from_vec(s, values.by_ref().take(s.iter().product()).collect())?)))
        .collect::<Result<Vec<_>>>()?;
    let pyr = FeaturePyramid { entries, t_fix: header.t_fix };
    pyr.validate()?;
    Ok(pyr)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CmdError::io(format!("creating {}", parent.display()), e))?;
    }
    let tmp = path.with_extension("partial");
    let io = |e| CmdError::io(format!("writing {}", path.display()), e);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.flush().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

/// Directory of `<stem>.pyr` files under a key-specific subdirectory.
pub struct FeatureCache {
    dir: PathBuf,
    key: String,
}

impl FeatureCache {
    pub fn new(root: &Path, key: &str) -> Self {
        Self { dir: root.join(&key[..16.min(key.len())]), key: key.to_string() }
    }

    pub fn path(&self, stem: &str) -> PathBuf {
        self.dir.join(format!("{stem}.pyr"))
    }

    /// Pyramids for `images`, loading cached entries and extracting (then
    /// storing) the rest.
    pub fn get_or_extract(&self, extractor: &FeatureExtractor, images: &[ImagePatch], batch: usize) -> Result<Vec<FeaturePyramid>> {
        let mut out: Vec<Option<FeaturePyramid>> = images.iter().map(|img| load_pyramid(&self.path(&img.source_id), Some(&self.key)).ok()).collect();
        let missing: Vec<usize> = (0..images.len()).filter(|&i| out[i].is_none()).collect();
        for chunk in missing.chunks(batch.max(1)) {
            let imgs: Vec<ImagePatch> = chunk.iter().map(|&i| images[i].clone()).collect();
            for (&i, pyr) in chunk.iter().zip(extractor.extract_batch(&imgs)?) {
                save_pyramid(&self.path(&images[i].source_id), &pyr, &self.key)?;
                out[i] = Some(pyr);
            }
        }
        Ok(out.into_iter().map(|p| p.expect("filled")).collect())
    }
}

/// Extract pyramids for many images in fixed-size batches.
pub fn extract_all(extractor: &FeatureExtractor, images: &[ImagePatch], batch: usize) -> Result<Vec<FeaturePyramid>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        out.extend(extractor.extract_batch(chunk)?);
    }
    Ok(out)
}
