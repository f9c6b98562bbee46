//! Segmentation heads over frozen features, their loss, training loop and
//! file format.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use cmd_autograd::{cosine_lr, AdamW, AdamWConfig, BatchStats, Graph, Init, ParamId, ParamStore, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{LinearParams, ParamSink, ShapeSink};
use crate::data::{ImagePatch, LabelMap, PatchDataset};
use crate::error::{CmdError, Result};
use crate::features::{extract_all, fuse_pyramid, write_atomic, ExtractionConfig, FeatureCache, FeatureExtractor, FeaturePyramid, DEFAULT_T_FIX};
use crate::pretrain::Checkpoint;

const WEIGHT_STD: f64 = 0.02;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;
/// Soft-Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;
/// Output widths of the SOTA head: the reduction, then four double-conv
/// blocks.
pub const SOTA_WIDTHS: [usize; 5] = [512, 256, 128, 64, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    LinearProbe,
    Light,
    Sota,
}

impl std::str::FromStr for HeadKind {
    type Err = CmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_probe" | "linear-probe" | "linear" => Ok(HeadKind::LinearProbe),
            "light" => Ok(HeadKind::Light),
            "sota" => Ok(HeadKind::Sota),
            other => Err(CmdError::config(format!("unknown head kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub num_classes: usize,
    /// Width of the light head's fusion path.
    pub unified_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate reached at the final epoch of the cosine schedule.
    pub lr_floor: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::LinearProbe,
            num_classes: 2,
            unified_dim: 256,
            epochs: 150,
            lr: 1e-3,
            lr_floor: 1e-6,
            batch_size: 8,
            weight_decay: 0.0,
            class_weights: None,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CmdError::config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.unified_dim == 0 {
            return bad("epochs, batch_size and unified_dim must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_floor >= 0.0 && self.lr_floor <= self.lr) {
            return bad(format!("need 0 <= lr_floor <= lr with lr > 0, got lr {} floor {}", self.lr, self.lr_floor));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.num_classes {
                return bad(format!("{} class weights for {} classes", w.len(), self.num_classes));
            }
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        cosine_lr(self.lr, self.lr_floor, epoch, self.epochs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBn {
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Index into the head's batch-norm statistics.
    pub stats: usize,
}

impl ConvBn {
    fn register<S: ParamSink + ?Sized>(sink: &mut S, name: &str, cin: usize, cout: usize, stats: &mut usize) -> Self {
        let idx = *stats;
        *stats += 1;
        Self {
            w: sink.add(&format!("{name}.conv.weight"), &[3, 3, cin, cout], Init::TruncNormal(WEIGHT_STD)),
            gamma: sink.add(&format!("{name}.bn.weight"), &[cout], Init::Ones),
            beta: sink.add(&format!("{name}.bn.bias"), &[cout], Init::Zeros),
            stats: idx,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixConv {
    pub reduce: LinearParams,
    pub conv1: ConvBn,
    pub conv2: ConvBn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadLayout {
    /// One weight slice per pyramid entry plus a shared bias.
    Linear { weights: Vec<ParamId>, bias: ParamId },
    Light { proj: Vec<LinearParams>, mix: Vec<MixConv>, out: LinearParams },
    Sota { stem: ConvBn, blocks: Vec<(ConvBn, ConvBn)>, out_w: ParamId, out_b: ParamId },
}

impl HeadLayout {
    /// Declare the parameters for input widths `in_widths` (pyramid order).
    /// Returns the layout and the number of batch-norm layers.
    pub fn register<S: ParamSink + ?Sized>(cfg: &HeadConfig, in_widths: &[usize], sink: &mut S) -> (Self, usize) {
        let k = cfg.num_classes;
        let mut stats = 0;
        let layout = match cfg.kind {
            HeadKind::LinearProbe => HeadLayout::Linear {
                weights: in_widths.iter().enumerate().map(|(i, &c)| sink.add(&format!("probe.weight.{i}"), &[c, k], Init::TruncNormal(WEIGHT_STD))).collect(),
                bias: sink.add("probe.bias", &[k], Init::Zeros),
            },
            HeadKind::Light => {
                let d = cfg.unified_dim;
                let proj = in_widths.iter().enumerate().map(|(i, &c)| LinearParams::register(sink, &format!("light.proj.{i}"), c, d)).collect();
                let mix = (1..in_widths.len())
                    .map(|l| MixConv {
                        reduce: LinearParams::register(sink, &format!("light.mix.{l}.reduce"), 2 * d, d),
                        conv1: ConvBn::register(sink, &format!("light.mix.{l}.a"), d, d, &mut stats),
                        conv2: ConvBn::register(sink, &format!("light.mix.{l}.b"), d, d, &mut stats),
                    })
                    .collect();
                let out = LinearParams::register(sink, "light.out", d, k);
                HeadLayout::Light { proj, mix, out }
            }
            HeadKind::Sota => {
                let c_in: usize = in_widths.iter().sum();
                let stem = ConvBn::register(sink, "sota.stem", c_in, SOTA_WIDTHS[0], &mut stats);
                let blocks = SOTA_WIDTHS
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| {
                        (
                            ConvBn::register(sink, &format!("sota.block.{i}.a"), w[0], w[1], &mut stats),
                            ConvBn::register(sink, &format!("sota.block.{i}.b"), w[1], w[1], &mut stats),
                        )
                    })
                    .collect();
                let out_w = sink.add("sota.out.weight", &[3, 3, SOTA_WIDTHS[4], k], Init::TruncNormal(WEIGHT_STD));
                let out_b = sink.add("sota.out.bias", &[k], Init::Zeros);
                HeadLayout::Sota { stem, blocks, out_w, out_b }
            }
        };
        (layout, stats)
    }
}

/// Trainable parameter count of a head over inputs of the given widths.
pub fn head_parameter_count(cfg: &HeadConfig, in_widths: &[usize]) -> usize {
    let mut sink = ShapeSink::default();
    HeadLayout::register(cfg, in_widths, &mut sink);
    sink.numel()
}

/// Batch-norm mode of a forward pass.
pub enum BnMode<'a, T> {
    /// Normalise with batch statistics and report them.
    Train,
    /// Normalise with the given running statistics.
    Eval(&'a [BatchStats<T>]),
}

struct Recorder<'a, 'b, T> {
    mode: &'a BnMode<'b, T>,
    batch: Vec<Option<BatchStats<T>>>,
}

impl<T: Real> Recorder<'_, '_, T> {
    fn conv_bn(&mut self, g: &mut Graph<'_, T>, x: Var, p: &ConvBn) -> Result<Var> {
        let w = g.param(p.w);
        let h = g.conv2d(x, w, None)?;
        let (gm, bt) = (g.param(p.gamma), g.param(p.beta));
        let running = match self.mode {
            BnMode::Train => None,
            BnMode::Eval(stats) => Some(stats.get(p.stats).ok_or_else(|| CmdError::config("missing batch-norm statistics"))?),
        };
        let (y, stats) = g.batch_norm(h, gm, bt, running, BN_EPS)?;
        if matches!(self.mode, BnMode::Train) {
            self.batch[p.stats] = Some(stats);
        }
        Ok(y)
    }
}

/// Pyramid inputs stacked over a batch: entry `i` is `[n, h_i, w_i, c_i]`.
pub fn stack_pyramids(pyrs: &[FeaturePyramid]) -> Result<Vec<Tensor<f32>>> {
    let first = pyrs.first().ok_or_else(|| CmdError::domain("no feature pyramids"))?;
    (0..first.entries.len())
        .map(|i| {
            let items = pyrs
                .iter()
                .map(|p| {
                    let (b, t) = p.entries.get(i).ok_or_else(|| CmdError::domain("pyramids have different entry counts"))?;
                    if *b != first.entries[i].0 {
                        return Err(CmdError::domain("pyramids tap different blocks"));
                    }
                    let s = t.shape();
                    Ok(t.clone().reshape(&[1, s[0], s[1], s[2]])?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&items)?)
        })
        .collect()
}

/// Fused dense maps stacked over a batch, `[n, target, target, C_in]`.
pub fn stack_dense(pyrs: &[FeaturePyramid], target: usize) -> Result<Tensor<f32>> {
    let items = pyrs
        .iter()
        .map(|p| {
            let f = fuse_pyramid(p, target)?.values;
            let s = f.shape().to_vec();
            Ok(f.reshape(&[1, s[0], s[1], s[2]])?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&items)?)
}

/// Per-pixel linear map over a dense feature map (`[n, h, w, C_in]`),
/// computed as the sum of per-entry slices.
pub fn linear_probe_forward<T: Real>(g: &mut Graph<'_, T>, f: Var, weights: &[ParamId], bias: ParamId, widths: &[usize]) -> Result<Var> {
    if g.shape(f)[3] != widths.iter().sum::<usize>() {
        return Err(CmdError::Size { what: "probe input".into(), expected: widths.iter().sum::<usize>().to_string(), got: g.shape(f)[3].to_string() });
    }
    let mut acc: Option<Var> = None;
    let mut start = 0;
    for (&w, &c) in weights.iter().zip(widths) {
        let slice = g.narrow(f, start, c)?;
        start += c;
        let wv = g.param(w);
        let y = g.linear(slice, wv, None)?;
        acc = Some(match acc {
            Some(a) => g.add(a, y)?,
            None => y,
        });
    }
    let b = g.param(bias);
    let y = acc.ok_or_else(|| CmdError::domain("probe has no inputs"))?;
    let zero = g.constant(Tensor::zeros(&[g.shape(b)[0], g.shape(b)[0]]));
    let bias_map = g.linear(y, zero, Some(b))?;
    Ok(g.add(y, bias_map)?)
}

/// Record a head forward pass returning `[n, target, target, K]` logits
/// and, in training mode, the batch statistics of every batch-norm layer.
pub fn head_forward<T: Real>(
    g: &mut Graph<'_, T>,
    layout: &HeadLayout,
    n_stats: usize,
    inputs: &HeadInputs<T>,
    target: usize,
    mode: &BnMode<'_, T>,
) -> Result<(Var, Vec<Option<BatchStats<T>>>)> {
    let mut rec = Recorder { mode, batch: vec![None; n_stats] };
    let logits = match (layout, inputs) {
        (HeadLayout::Linear { weights, bias }, HeadInputs::Pyramid(entries)) => {
            // resize commutes with the per-pixel linear map, so each entry is
            // projected at its native resolution and upsampled afterwards
            let mut acc = None;
            for (&w, t) in weights.iter().zip(entries) {
                let x = g.constant(t.clone());
                let wv = g.param(w);
                let y = g.linear(x, wv, None)?;
                let y = g.resize(y, target, target)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, y)?,
                    None => y,
                });
            }
            let y = acc.ok_or_else(|| CmdError::domain("probe has no inputs"))?;
            let k = g.shape(y)[3];
            let zero = g.constant(Tensor::zeros(&[k, k]));
            let b = g.param(*bias);
            let bias_map = g.linear(y, zero, Some(b))?;
            g.add(y, bias_map)?
        }
        (HeadLayout::Linear { weights, bias }, HeadInputs::Dense(f)) => {
            let widths: Vec<usize> = weights.iter().map(|&w| g_param_rows(g, w)).collect();
            let x = g.constant(f.clone());
            let y = linear_probe_forward(g, x, weights, *bias, &widths)?;
            g.resize(y, target, target)?
        }
        (HeadLayout::Light { proj, mix, out }, HeadInputs::Pyramid(entries)) => {
            if entries.len() != proj.len() {
                return Err(CmdError::Size { what: "light head input".into(), expected: format!("{} entries", proj.len()), got: entries.len().to_string() });
            }
            let x0 = g.constant(entries[0].clone());
            let mut h = proj[0].apply(g, x0)?;
            for (l, m) in mix.iter().enumerate() {
                let e = &entries[l + 1];
                let (eh, ew) = (e.shape()[1], e.shape()[2]);
                let up = g.resize(h, eh, ew)?;
                let xe = g.constant(e.clone());
                let pe = proj[l + 1].apply(g, xe)?;
                let cat = g.concat(&[up, pe])?;
                let r = m.reduce.apply(g, cat)?;
                let a = rec.conv_bn(g, r, &m.conv1)?;
                let a = g.relu(a);
                let b = rec.conv_bn(g, a, &m.conv2)?;
                let s = g.add(r, b)?;
                h = g.relu(s);
            }
            let y = out.apply(g, h)?;
            g.resize(y, target, target)?
        }
        (HeadLayout::Sota { stem, blocks, out_w, out_b }, HeadInputs::Dense(f)) => {
            let x = g.constant(f.clone());
            let h = rec.conv_bn(g, x, stem)?;
            let mut h = g.relu(h);
            for (a, b) in blocks {
                let y = rec.conv_bn(g, h, a)?;
                let y = g.relu(y);
                let y = rec.conv_bn(g, y, b)?;
                h = g.relu(y);
            }
            let (w, b) = (g.param(*out_w), g.param(*out_b));
            let y = g.conv2d(h, w, Some(b))?;
            g.resize(y, target, target)?
        }
        (HeadLayout::Light { .. }, HeadInputs::Dense(_)) => return Err(CmdError::domain("the light head consumes a feature pyramid")),
        (HeadLayout::Sota { .. }, HeadInputs::Pyramid(_)) => return Err(CmdError::domain("the SOTA head consumes a fused feature map")),
    };
    Ok((logits, rec.batch))
}

fn g_param_rows<T: Real>(g: &mut Graph<'_, T>, id: ParamId) -> usize {
    let v = g.param(id);
    g.shape(v)[0]
}

/// Batched head input in the form the head kind consumes.
pub enum HeadInputs<T> {
    Pyramid(Vec<Tensor<T>>),
    Dense(Tensor<T>),
}

/// `CE + soft Dice` over `[.., K]` logits with equal weights.
pub fn ce_dice_loss<T: Real>(g: &mut Graph<'_, T>, logits: Var, labels: &[u32], class_weights: Option<&[f64]>) -> Result<Var> {
    let ce = g.cross_entropy(logits, labels, class_weights)?;
    let dice = g.soft_dice_loss(logits, labels, DICE_SMOOTH)?;
    Ok(g.add(ce, dice)?)
}

/// Value of [`ce_dice_loss`] for constant logits.
pub fn ce_dice_value<T: Real>(logits: &Tensor<T>, labels: &[u32], class_weights: Option<&[f64]>) -> Result<f64> {
    let mut g = Graph::<T>::new();
    let x = g.input(logits.clone());
    let l = ce_dice_loss(&mut g, x, labels, class_weights)?;
    Ok(g.value(l).item().f64())
}

/// A trained (or freshly initialised) head.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub config: HeadConfig,
    pub blocks: Vec<usize>,
    pub in_widths: Vec<usize>,
    pub layout: HeadLayout,
    pub params: ParamStore<f32>,
    pub bn_stats: Vec<BatchStats<f32>>,
    /// Per-entry channel statistics used to standardise inputs.
    pub input_norm: Vec<ChannelNorm>,
    /// Extraction timestep the head was trained on.
    pub t_fix: u32,
    pub use_condition: bool,
}

/// Per-channel affine standardisation `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelNorm {
    pub fn identity(c: usize) -> Self {
        Self { mean: vec![0.0; c], std: vec![1.0; c] }
    }

    /// Statistics over every pixel of every tensor (`[.., c]` layout).
    pub fn fit<'a>(tensors: impl Iterator<Item = &'a Tensor<f32>>, c: usize) -> Self {
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut n = 0usize;
        for t in tensors {
            for px in t.data().chunks_exact(c) {
                for ((s, q), &v) in sum.iter_mut().zip(sq.iter_mut()).zip(px) {
                    *s += v as f64;
                    *q += v as f64 * v as f64;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| ((q / n - m * m).max(0.0).sqrt() + 1e-6) as f32).collect();
        Self { mean: mean.into_iter().map(|m| m as f32).collect(), std }
    }

    pub fn apply(&self, t: &Tensor<f32>) -> Tensor<f32> {
        let c = self.mean.len();
        let mut out = t.clone();
        for px in out.data_mut().chunks_exact_mut(c) {
            for ((v, m), s) in px.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

impl Head {
    pub fn new(config: &HeadConfig, blocks: &[usize], in_widths: &[usize]) -> Result<Self> {
        config.validate()?;
        if in_widths.is_empty() || blocks.len() != in_widths.len() {
            return Err(CmdError::domain("head needs one width per tapped block"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (layout, n_stats) = HeadLayout::register(config, in_widths, &mut crate::backbone::InitSink { store: &mut params, rng: &mut rng });
        let bn_stats = (0..n_stats).map(|_| BatchStats { mean: Vec::new(), var: Vec::new() }).collect();
        let input_norm = in_widths.iter().map(|&c| ChannelNorm::identity(c)).collect();
        let mut head = Self { config: config.clone(), blocks: blocks.to_vec(), in_widths: in_widths.to_vec(), layout, params, bn_stats, input_norm, t_fix: DEFAULT_T_FIX, use_condition: true };
        head.reset_bn_stats();
        Ok(head)
    }

    /// Head shaped for the pyramids it will consume.
    pub fn for_pyramid(config: &HeadConfig, pyr: &FeaturePyramid) -> Result<Self> {
        Self::new(config, &pyr.blocks(), &pyr.widths())
    }

    fn bn_widths(&self) -> Vec<usize> {
        let mut out = vec![0; self.bn_stats.len()];
        let mut visit = |p: &ConvBn| out[p.stats] = self.params.get(p.gamma).len();
        match &self.layout {
            HeadLayout::Linear { .. } => {}
            HeadLayout::Light { mix, .. } => mix.iter().for_each(|m| {
                visit(&m.conv1);
                visit(&m.conv2);
            }),
            HeadLayout::Sota { stem, blocks, .. } => {
                visit(stem);
                blocks.iter().for_each(|(a, b)| {
                    visit(a);
                    visit(b);
                });
            }
        }
        out
    }

    fn reset_bn_stats(&mut self) {
        let widths = self.bn_widths();
        for (s, c) in self.bn_stats.iter_mut().zip(widths) {
            *s = BatchStats { mean: vec![0.0; c], var: vec![1.0; c] };
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    fn check_pyramid(&self, pyr: &FeaturePyramid) -> Result<()> {
        if pyr.blocks() != self.blocks || pyr.widths() != self.in_widths {
            return Err(CmdError::Size {
                what: "feature pyramid".into(),
                expected: format!("blocks {:?} widths {:?}", self.blocks, self.in_widths),
                got: format!("blocks {:?} widths {:?}", pyr.blocks(), pyr.widths()),
            });
        }
        Ok(())
    }

    /// Inputs in the form this head consumes.
    pub fn inputs(&self, pyrs: &[FeaturePyramid], target: usize) -> Result<HeadInputs<f32>> {
        for p in pyrs {
            self.check_pyramid(p)?;
        }
        let normed: Vec<FeaturePyramid> = pyrs.iter().map(|p| self.standardize(p)).collect();
        let pyrs = &normed[..];
        Ok(match self.config.kind {
            HeadKind::LinearProbe | HeadKind::Light => HeadInputs::Pyramid(stack_pyramids(pyrs)?),
            HeadKind::Sota => HeadInputs::Dense(stack_dense(pyrs, target)?),
        })
    }

    /// Feature extraction settings matching the training inputs.
    pub fn extraction(&self) -> ExtractionConfig {
        ExtractionConfig { t_fix: self.t_fix, blocks: self.blocks.clone(), use_condition: self.use_condition }
    }

    pub fn standardize(&self, pyr: &FeaturePyramid) -> FeaturePyramid {
        let entries = pyr.entries.iter().zip(&self.input_norm).map(|((b, t), n)| (*b, n.apply(t))).collect();
        FeaturePyramid { entries, t_fix: pyr.t_fix }
    }

    /// Fit the input standardisation to a training set.
    pub fn fit_input_norm(&mut self, pyrs: &[FeaturePyramid]) {
        self.input_norm = self.in_widths.iter().enumerate().map(|(i, &c)| ChannelNorm::fit(pyrs.iter().map(|p| &p.entries[i].1), c)).collect();
    }

    /// `[n, target, target, K]` logits in inference mode.
    pub fn logits(&self, pyrs: &[FeaturePyramid], target: usize) -> Result<Tensor<f32>> {
        let inputs = self.inputs(pyrs, target)?;
        let mut g = Graph::inference(&self.params);
        let (y, _) = head_forward(&mut g, &self.layout, self.bn_stats.len(), &inputs, target, &BnMode::Eval(&self.bn_stats))?;
        Ok(g.take(y))
    }

    /// Arg-max label map per pyramid.
    pub fn predict(&self, pyrs: &[FeaturePyramid], target: usize) -> Result<Vec<LabelMap>> {
        let logits = self.logits(pyrs, target)?;
        let k = self.config.num_classes;
        logits
            .data()
            .chunks_exact(target * target * k)
            .map(|img| LabelMap::new(target, target, img.chunks_exact(k).map(argmax).collect()))
            .collect()
    }

    /// Save as a JSON header line followed by little-endian `f32` payload
    /// (parameters, then batch-norm means and variances).
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = HeadFileHeader {
            format: HEAD_FORMAT.into(),
            config: self.config.clone(),
            blocks: self.blocks.clone(),
            in_widths: self.in_widths.clone(),
            tensors: self.params.iter().map(|e| (e.name.clone(), e.value.shape().to_vec())).collect(),
            bn_widths: self.bn_stats.iter().map(|s| s.mean.len()).collect(),
            input_norm: self.input_norm.clone(),
            t_fix: self.t_fix,
            use_condition: self.use_condition,
        };
        let mut bytes = serde_json::to_vec(&header).expect("serialisable");
        bytes.push(b'\n');
        for e in self.params.iter() {
            bytes.extend(e.value.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        for s in &self.bn_stats {
            bytes.extend(s.mean.iter().chain(&s.var).flat_map(|v| v.to_le_bytes()));
        }
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| CmdError::io(format!("opening {}", path.display()), e))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| CmdError::io(format!("reading {}", path.display()), e))?;
        let header: HeadFileHeader = serde_json::from_str(line.trim_end()).map_err(|e| CmdError::format(path, e.to_string()))?;
        if header.format != HEAD_FORMAT {
            return Err(CmdError::format(path, "not a head file"));
        }
        let mut head = Head::new(&header.config, &header.blocks, &header.in_widths)?;
        let expected: Vec<(String, Vec<usize>)> = head.params.iter().map(|e| (e.name.clone(), e.value.shape().to_vec())).collect();
        let norm_widths: Vec<usize> = header.input_norm.iter().map(|n| n.mean.len()).collect();
        if expected != header.tensors || head.bn_widths() != header.bn_widths || norm_widths != header.in_widths {
            return Err(CmdError::format(path, "tensor layout does not match the head configuration"));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| CmdError::io(format!("reading {}", path.display()), e))?;
        let total = head.params.numel() + 2 * header.bn_widths.iter().sum::<usize>();
        if payload.len() != 4 * total {
            return Err(CmdError::format(path, format!("payload has {} bytes, expected {}", payload.len(), 4 * total)));
        }
        let mut values = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        for id in 0..head.params.len() {
            for v in head.params.get_mut(id).data_mut() {
                *v = values.next().expect("length checked");
            }
        }
        for (s, &c) in head.bn_stats.iter_mut().zip(&header.bn_widths) {
            s.mean = values.by_ref().take(c).collect();
            s.var = values.by_ref().take(c).collect();
        }
        head.input_norm = header.input_norm;
        head.t_fix = header.t_fix;
        head.use_condition = header.use_condition;
        Ok(head)
    }
}

const HEAD_FORMAT: &str = "cmd-head-v1";

#[derive(Debug, Serialize, Deserialize)]
struct HeadFileHeader {
    format: String,
    config: HeadConfig,
    blocks: Vec<usize>,
    in_widths: Vec<usize>,
    tensors: Vec<(String, Vec<usize>)>,
    bn_widths: Vec<usize>,
    input_norm: Vec<ChannelNorm>,
    t_fix: u32,
    use_condition: bool,
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Per-epoch record of head training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Optimise only the head's parameters on frozen pyramids and their label
/// maps (all of side `target`).
pub fn train_head(pyrs: &[FeaturePyramid], labels: &[LabelMap], cfg: &HeadConfig) -> Result<(Head, Vec<HeadEpoch>)> {
    cfg.validate()?;
    if pyrs.is_empty() {
        return Err(CmdError::domain("head training needs at least one labeled sample"));
    }
    if pyrs.len() != labels.len() {
        return Err(CmdError::Size { what: "label list".into(), expected: pyrs.len().to_string(), got: labels.len().to_string() });
    }
    let target = labels[0].height;
    if let Some(m) = labels.iter().find(|m| m.height != target || m.width != target) {
        return Err(CmdError::Size { what: "label map".into(), expected: format!("{target}x{target}"), got: format!("{}x{}", m.height, m.width) });
    }
    if let Some(&l) = labels.iter().flat_map(|m| &m.labels).find(|&&l| l as usize >= cfg.num_classes) {
        return Err(CmdError::domain(format!("label {l} outside [0, {})", cfg.num_classes)));
    }
    let mut head = Head::for_pyramid(cfg, &pyrs[0])?;
    for p in pyrs {
        head.check_pyramid(p)?;
    }
    head.fit_input_norm(pyrs);
    let mut opt = AdamW::new(&head.params, AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut order: Vec<usize> = (0..pyrs.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<FeaturePyramid> = chunk.iter().map(|&i| pyrs[i].clone()).collect();
            let y: Vec<u32> = chunk.iter().flat_map(|&i| labels[i].labels.iter().copied()).collect();
            let inputs = head.inputs(&batch, target)?;
            let (grads, value, stats) = {
                let mut g = Graph::with_params(&head.params);
                let (logits, stats) = head_forward(&mut g, &head.layout, head.bn_stats.len(), &inputs, target, &BnMode::Train)?;
                let loss = ce_dice_loss(&mut g, logits, &y, cfg.class_weights.as_deref())?;
                let value = g.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(CmdError::NonFinite { step: epoch as u64, detail: "head loss".into() });
                }
                (g.backward(loss)?.dense(&head.params), value, stats)
            };
            opt.update(&mut head.params, &grads, lr)?;
            for (run, batch) in head.bn_stats.iter_mut().zip(stats) {
                if let Some(b) = batch {
                    for (r, v) in run.mean.iter_mut().zip(&b.mean) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                    }
                    for (r, v) in run.var.iter_mut().zip(&b.var) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                    }
                }
            }
            total += value;
            batches += 1;
        }
        log.push(HeadEpoch { epoch, lr, loss: total / batches as f64 });
    }
    Ok((head, log))
}

/// Extract (or reuse cached) pyramids of a labeled split from a frozen
/// checkpoint and train a head on them. The checkpoint is only read.
pub fn train_head_from_checkpoint(
    ckpt: &Checkpoint,
    train: &PatchDataset,
    cfg: &HeadConfig,
    extraction: ExtractionConfig,
    cache_root: Option<&Path>,
) -> Result<(Head, Vec<HeadEpoch>)> {
    let samples = train.labeled()?;
    if samples.is_empty() {
        return Err(CmdError::domain("head training needs at least one labeled sample"));
    }
    let extractor = FeatureExtractor::from_checkpoint(ckpt, extraction.clone())?;
    let images: Vec<ImagePatch> = samples.iter().map(|s| s.image.clone()).collect();
    let pyrs = pyramids_for(&extractor, &images, cache_root)?;
    let labels: Vec<LabelMap> = samples.iter().map(|s| s.mask.clone()).collect();
    let (mut head, log) = train_head(&pyrs, &labels, cfg)?;
    head.t_fix = extraction.t_fix;
    head.use_condition = extraction.use_condition;
    Ok((head, log))
}

/// Pyramids for `images`, through the on-disk cache when a root is given.
pub fn pyramids_for(extractor: &FeatureExtractor, images: &[ImagePatch], cache_root: Option<&Path>) -> Result<Vec<FeaturePyramid>> {
    match cache_root {
        Some(root) => FeatureCache::new(root, &extractor.cache_key()).get_or_extract(extractor, images, EXTRACT_BATCH),
        None => extract_all(extractor, images, EXTRACT_BATCH),
    }
}

const EXTRACT_BATCH: usize = 8;
