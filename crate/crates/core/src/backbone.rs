//! Conditioned ConvNeXt U-Net: five encoder stages, a bottleneck, five
//! mirrored decoder stages with skip fusion, and a pixel output head.
//!
//! Tensors are channels-last (`[n, h, w, c]`).

use cmd_autograd::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{adaln_projection, fuse_condition, modulated_norm, timestep_embedding, AdaLnParams, ConditionParams, ConditionVars, ConditionVector};
use crate::error::{CmdError, Result};

const WEIGHT_STD: f64 = 0.02;
const GRN_EPS: f64 = 1e-6;
const DW_KERNEL: usize = 7;

/// Receives parameter declarations in a fixed order and hands back ids.
pub trait ParamSink {
    fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId;
}

/// Records names and shapes only; used to count parameters of models too
/// large to materialise.
#[derive(Debug, Default)]
pub struct ShapeSink {
    pub shapes: Vec<(String, Vec<usize>)>,
}

impl ShapeSink {
    pub fn numel(&self) -> usize {
        self.shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

impl ParamSink for ShapeSink {
    fn add(&mut self, name: &str, shape: &[usize], _init: Init) -> ParamId {
        self.shapes.push((name.to_string(), shape.to_vec()));
        self.shapes.len() - 1
    }
}

/// Materialises parameters into a store, drawing from `rng`.
pub struct InitSink<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Real, R: rand::Rng> ParamSink for InitSink<'_, T, R> {
    fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        self.store.add_init(name, shape, init, self.rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Stage widths from the finest encoder stage to the bottleneck.
    pub channels: Vec<usize>,
    pub encoder_depths: Vec<usize>,
    pub bottleneck_depth: usize,
    pub decoder_depths: Vec<usize>,
    pub mlp_ratio: usize,
    pub input_size: usize,
    pub in_channels: usize,
    pub cond_dim: usize,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
    /// Width of the frozen image-level feature `z`.
    pub feature_dim: usize,
}

impl ModelConfig {
    fn with_channels(channels: [usize; 6], input_size: usize) -> Self {
        Self {
            channels: channels.to_vec(),
            encoder_depths: vec![1, 2, 3, 2, 2],
            bottleneck_depth: 6,
            decoder_depths: vec![2, 2, 3, 2, 1],
            mlp_ratio: 3,
            input_size,
            in_channels: 3,
            cond_dim: 6 * channels[0],
            freq_dim: channels[0],
            feature_dim: 1024,
        }
    }

    pub fn cmd_b() -> Self {
        Self::with_channels([256, 256, 256, 512, 512, 1024], 256)
    }

    pub fn cmd_l() -> Self {
        Self::with_channels([512, 512, 512, 1024, 1024, 2048], 256)
    }

    /// Desk-scale variant for 64x64 inputs.
    pub fn tiny() -> Self {
        Self::with_channels([32, 32, 32, 64, 64, 128], 64)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cmd-b" | "cmd_b" | "b" => Ok(Self::cmd_b()),
            "cmd-l" | "cmd_l" | "l" => Ok(Self::cmd_l()),
            "cmd-tiny" | "tiny" => Ok(Self::tiny()),
            other => Err(CmdError::config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CmdError::config(m));
        if self.channels.len() != 6 {
            return bad(format!("expected 6 stage widths, got {}", self.channels.len()));
        }
        if self.encoder_depths.len() != 5 || self.decoder_depths.len() != 5 {
            return bad("encoder and decoder need 5 stages each".into());
        }
        if self.channels.contains(&0) || self.mlp_ratio == 0 || self.cond_dim == 0 || self.in_channels == 0 {
            return bad("widths, mlp_ratio, cond_dim and in_channels must be positive".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return bad(format!("input_size {} is not divisible by 32", self.input_size));
        }
        if self.freq_dim == 0 || !self.freq_dim.is_multiple_of(2) {
            return bad(format!("freq_dim {} must be even", self.freq_dim));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.encoder_depths.iter().sum::<usize>() + self.bottleneck_depth + self.decoder_depths.iter().sum::<usize>()
    }

    pub fn decoder_block_count(&self) -> usize {
        self.decoder_depths.iter().sum()
    }

    /// Width of decoder stage `j` (0 = coarsest).
    pub fn decoder_width(&self, stage: usize) -> usize {
        self.channels[4 - stage]
    }

    /// Downsampling factor of decoder stage `j` relative to the input.
    pub fn decoder_stride(&self, stage: usize) -> usize {
        1 << (4 - stage)
    }

    /// `(stage, width, stride)` of each decoder block, indexed from 1 in
    /// execution order.
    pub fn decoder_blocks(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (j, &d) in self.decoder_depths.iter().enumerate() {
            out.extend(std::iter::repeat_n((j, self.decoder_width(j), self.decoder_stride(j)), d));
        }
        out
    }

    /// Checks tap indices (1-based, strictly increasing) and returns their
    /// widths.
    pub fn tap_widths(&self, taps: &[usize]) -> Result<Vec<usize>> {
        let blocks = self.decoder_blocks();
        let mut prev = 0;
        taps.iter()
            .map(|&t| {
                if t == 0 || t > blocks.len() {
                    return Err(CmdError::domain(format!("decoder block {t} outside [1, {}]", blocks.len())));
                }
                if t <= prev {
                    return Err(CmdError::domain(format!("tap indices must be strictly increasing, got {taps:?}")));
                }
                prev = t;
                Ok(blocks[t - 1].1)
            })
            .collect()
    }
}

/// The default downstream tap set.
pub const DEFAULT_TAPS: [usize; 6] = [1, 3, 5, 6, 8, 9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn register<S: ParamSink + ?Sized>(sink: &mut S, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: sink.add(&format!("{name}.weight"), &[fan_in, fan_out], Init::TruncNormal(WEIGHT_STD)),
            b: sink.add(&format!("{name}.bias"), &[fan_out], Init::Zeros),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.linear(x, w, Some(b))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockParams {
    pub width: usize,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub ada: AdaLnParams,
    pub pw1: LinearParams,
    pub grn_gamma: ParamId,
    pub grn_beta: ParamId,
    pub pw2: LinearParams,
}

impl BlockParams {
    pub fn register<S: ParamSink + ?Sized>(sink: &mut S, name: &str, width: usize, mlp_ratio: usize, cond_dim: usize) -> Self {
        let hidden = mlp_ratio * width;
        Self {
            width,
            dw_w: sink.add(&format!("{name}.dwconv.weight"), &[DW_KERNEL, DW_KERNEL, width], Init::TruncNormal(WEIGHT_STD)),
            dw_b: sink.add(&format!("{name}.dwconv.bias"), &[width], Init::Zeros),
            ada: AdaLnParams::register(sink, name, cond_dim, width),
            pw1: LinearParams::register(sink, &format!("{name}.pwconv1"), width, hidden),
            grn_gamma: sink.add(&format!("{name}.grn.gamma"), &[hidden], Init::Zeros),
            grn_beta: sink.add(&format!("{name}.grn.beta"), &[hidden], Init::Zeros),
            pw2: LinearParams::register(sink, &format!("{name}.pwconv2"), hidden, width),
        }
    }
}

/// Parameter ids of the whole network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub cond: ConditionParams,
    pub stem_w: ParamId,
    pub stem_b: ParamId,
    pub encoder: Vec<Vec<BlockParams>>,
    pub down: Vec<LinearParams>,
    pub bottleneck: Vec<BlockParams>,
    pub up: Vec<LinearParams>,
    pub fuse: Vec<LinearParams>,
    pub decoder: Vec<Vec<BlockParams>>,
    pub head: LinearParams,
}

impl Layout {
    pub fn register<S: ParamSink + ?Sized>(cfg: &ModelConfig, sink: &mut S) -> Self {
        let ch = &cfg.channels;
        let block = |sink: &mut S, name: String, width: usize| BlockParams::register(sink, &name, width, cfg.mlp_ratio, cfg.cond_dim);
        let cond = ConditionParams::register(sink, cfg.freq_dim, cfg.cond_dim, cfg.feature_dim);
        let stem_w = sink.add("stem.weight", &[3, 3, cfg.in_channels, ch[0]], Init::TruncNormal(WEIGHT_STD));
        let stem_b = sink.add("stem.bias", &[ch[0]], Init::Zeros);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for (i, &depth) in cfg.encoder_depths.iter().enumerate() {
            encoder.push((0..depth).map(|b| block(sink, format!("enc.{i}.{b}"), ch[i])).collect());
            down.push(LinearParams::register(sink, &format!("down.{i}"), 4 * ch[i], ch[i + 1]));
        }
        let bottleneck = (0..cfg.bottleneck_depth).map(|b| block(sink, format!("mid.{b}"), ch[5])).collect();
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        let mut decoder = Vec::new();
        for (j, &depth) in cfg.decoder_depths.iter().enumerate() {
            let (from, to) = (ch[5 - j], ch[4 - j]);
            up.push(LinearParams::register(sink, &format!("up.{j}"), from, 4 * to));
            fuse.push(LinearParams::register(sink, &format!("fuse.{j}"), 2 * to, to));
            decoder.push((0..depth).map(|b| block(sink, format!("dec.{j}.{b}"), to)).collect());
        }
        let head = LinearParams::register(sink, "head", ch[0], cfg.in_channels);
        Self { cond, stem_w, stem_b, encoder, down, bottleneck, up, fuse, decoder, head }
    }
}

/// Parameter count of a configuration, without allocating weights.
pub fn parameter_count(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let mut sink = ShapeSink::default();
    Layout::register(cfg, &mut sink);
    Ok(sink.numel())
}

/// ConvNeXt block with adaLN-Zero conditioning:
/// `x + gate * pw2(GRN(GELU(pw1((1 + scale) * LN(dw7(x)) + shift))))`.
///
/// `c_act` is `silu(c)`, shape `[n, cond_dim]`.
pub fn convnext_block<T: Real>(g: &mut Graph<'_, T>, x: Var, c_act: Var, p: &BlockParams) -> Result<Var> {
    let width = *g.shape(x).last().unwrap_or(&0);
    if width != p.width {
        return Err(CmdError::Size { what: "block input width".into(), expected: p.width.to_string(), got: width.to_string() });
    }
    let (dw_w, dw_b) = (g.param(p.dw_w), g.param(p.dw_b));
    let h = g.depthwise_conv(x, dw_w, Some(dw_b))?;
    let m = adaln_projection(g, c_act, &p.ada)?;
    let h = modulated_norm(g, h, &m)?;
    let h = p.pw1.apply(g, h)?;
    let h = g.gelu(h);
    let (gg, gb) = (g.param(p.grn_gamma), g.param(p.grn_beta));
    let h = g.grn(h, gg, gb, GRN_EPS)?;
    let h = p.pw2.apply(g, h)?;
    Ok(g.gated_residual(x, h, m.gate)?)
}

/// Space-to-depth by 2 followed by a pointwise projection.
pub fn downsample<T: Real>(g: &mut Graph<'_, T>, x: Var, p: &LinearParams) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 4 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
        return Err(CmdError::Size { what: "downsample input".into(), expected: "even spatial dims".into(), got: format!("{s:?}") });
    }
    let h = g.pixel_unshuffle(x, 2)?;
    p.apply(g, h)
}

/// Pointwise projection to four times the target width followed by
/// depth-to-space by 2.
pub fn upsample<T: Real>(g: &mut Graph<'_, T>, x: Var, p: &LinearParams) -> Result<Var> {
    let h = p.apply(g, x)?;
    if !g.shape(h)[3].is_multiple_of(4) {
        return Err(CmdError::Size { what: "upsample projection".into(), expected: "width divisible by 4".into(), got: g.shape(h)[3].to_string() });
    }
    Ok(g.pixel_shuffle(h, 2)?)
}

/// Concatenate decoder and encoder maps along channels and project back to
/// the decoder width.
pub fn fuse_skip<T: Real>(g: &mut Graph<'_, T>, dec: Var, enc: Var, p: &LinearParams) -> Result<Var> {
    let (ds, es) = (g.shape(dec), g.shape(enc));
    if ds[..3] != es[..3] {
        return Err(CmdError::Size { what: "skip connection".into(), expected: format!("{:?}", &ds[..3]), got: format!("{:?}", &es[..3]) });
    }
    let h = g.concat(&[dec, enc])?;
    p.apply(g, h)
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Decoder blocks (1-based, strictly increasing) whose outputs are kept.
    pub taps: Vec<usize>,
    /// Record the input and output of every block.
    pub trace_blocks: bool,
    /// Stop after the last requested tap, skipping the remaining decoder
    /// blocks and the output head.
    pub taps_only: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    pub input: Var,
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Reconstruction, absent when stopped early for taps.
    pub recon: Option<Var>,
    pub taps: Vec<(usize, Var)>,
    pub blocks: Vec<BlockTrace>,
    pub cond: ConditionVars,
}

/// Record a full forward pass of `x` (`[n, s, s, in_channels]`) at the
/// given per-sample timesteps with optional frozen features `z`.
pub fn forward_graph<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    layout: &Layout,
    x: Var,
    timesteps: &[u32],
    z: Option<&Tensor<T>>,
    opts: &ForwardOptions,
) -> Result<ForwardVars> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || !shape[1].is_multiple_of(32) || !shape[2].is_multiple_of(32) || shape[3] != cfg.in_channels {
        return Err(CmdError::Size {
            what: "model input".into(),
            expected: format!("[n, h, w, {}] with h, w divisible by 32", cfg.in_channels),
            got: format!("{shape:?}"),
        });
    }
    if timesteps.len() != shape[0] {
        return Err(CmdError::Size { what: "timesteps".into(), expected: shape[0].to_string(), got: timesteps.len().to_string() });
    }
    cfg.tap_widths(&opts.taps)?;
    let last_tap = opts.taps.last().copied();

    let t_embed = timestep_embedding(g, &layout.cond, timesteps)?;
    let cond = fuse_condition(g, &layout.cond, t_embed, z)?;
    let c_act = g.silu(cond.c);

    let mut blocks = Vec::new();
    let mut run_block = |g: &mut Graph<'_, T>, h: Var, p: &BlockParams| -> Result<Var> {
        let out = convnext_block(g, h, c_act, p)?;
        if opts.trace_blocks {
            blocks.push(BlockTrace { input: h, output: out });
        }
        Ok(out)
    };

    let (sw, sb) = (g.param(layout.stem_w), g.param(layout.stem_b));
    let mut h = g.conv2d(x, sw, Some(sb))?;
    let mut skips = Vec::with_capacity(5);
    for (stage, down) in layout.encoder.iter().zip(&layout.down) {
        for p in stage {
            h = run_block(g, h, p)?;
        }
        skips.push(h);
        h = downsample(g, h, down)?;
    }
    for p in &layout.bottleneck {
        h = run_block(g, h, p)?;
    }
    let mut taps = Vec::new();
    let mut index = 0;
    for (j, stage) in layout.decoder.iter().enumerate() {
        h = upsample(g, h, &layout.up[j])?;
        h = fuse_skip(g, h, skips[4 - j], &layout.fuse[j])?;
        for p in stage {
            h = run_block(g, h, p)?;
            index += 1;
            if opts.taps.contains(&index) {
                taps.push((index, h));
            }
            if opts.taps_only && Some(index) == last_tap {
                return Ok(ForwardVars { recon: None, taps, blocks, cond });
            }
        }
    }
    let recon = layout.head.apply(g, h)?;
    Ok(ForwardVars { recon: Some(recon), taps, blocks, cond })
}

/// A built network: configuration, parameter layout and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore<f32>,
}

/// Initialise a model deterministically from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let layout = Layout::register(config, &mut InitSink { store: &mut params, rng: &mut rng });
    Ok(Model { config: config.clone(), layout, params })
}

/// Output of an inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub recon: Option<Tensor<f32>>,
    pub taps: Vec<(usize, Tensor<f32>)>,
}

impl Model {
    /// Rebuild the layout for `config` and adopt `params`, checking names and
    /// shapes.
    pub fn from_params(config: &ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let mut sink = ShapeSink::default();
        let layout = Layout::register(config, &mut sink);
        if sink.shapes.len() != params.len() {
            return Err(CmdError::config(format!("expected {} parameter tensors, found {}", sink.shapes.len(), params.len())));
        }
        for ((name, shape), e) in sink.shapes.iter().zip(params.entries()) {
            if name != &e.name || shape.as_slice() != e.value.shape() {
                return Err(CmdError::config(format!("parameter `{}` {:?} does not match `{name}` {shape:?}", e.name, e.value.shape())));
            }
        }
        Ok(Self { config: config.clone(), layout, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// Inference forward pass without gradient recording.
    pub fn forward(&self, x_t: &Tensor<f32>, timesteps: &[u32], z: Option<&Tensor<f32>>, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let mut g = Graph::inference(&self.params);
        let x = g.input(x_t.clone());
        let vars = forward_graph(&mut g, &self.config, &self.layout, x, timesteps, z, opts)?;
        let recon = vars.recon.map(|v| g.take(v));
        let taps = vars.taps.iter().map(|&(i, v)| (i, g.value(v).clone())).collect();
        Ok(ForwardOutput { recon, taps })
    }

    /// `phi_t(t)` for one timestep.
    pub fn timestep_embedding(&self, t: u32) -> Result<Vec<f32>> {
        let mut g = Graph::inference(&self.params);
        let v = timestep_embedding(&mut g, &self.layout.cond, &[t])?;
        Ok(g.take(v).into_data())
    }

    /// The fused condition `c` for one sample.
    pub fn condition(&self, t: u32, z: Option<&[f32]>) -> Result<ConditionVector> {
        let mut g = Graph::inference(&self.params);
        let t_embed = timestep_embedding(&mut g, &self.layout.cond, &[t])?;
        let z = z.map(|z| Tensor::from_vec(&[1, z.len()], z.to_vec())).transpose()?;
        let vars = fuse_condition(&mut g, &self.layout.cond, t_embed, z.as_ref())?;
        Ok(ConditionVector {
            values: g.value(vars.c).data().to_vec(),
            t_embed: g.value(vars.t_embed).data().to_vec(),
            z_embed: vars.z_embed.map(|v| g.value(v).data().to_vec()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_count_and_tap_width() {
        let l = ModelConfig::cmd_l();
        assert_eq!(l.block_count(), 26);
        assert_eq!(l.tap_widths(&DEFAULT_TAPS).unwrap().iter().sum::<usize>(), 4096);
        assert!(l.tap_widths(&[0]).is_err());
        assert!(l.tap_widths(&[11]).is_err());
        assert!(l.tap_widths(&[3, 1]).is_err());
    }

    #[test]
    fn sink_and_store_agree() {
        let cfg = ModelConfig::tiny();
        let m = build_model(&cfg, 0).unwrap();
        assert_eq!(m.parameter_count(), parameter_count(&cfg).unwrap());
        assert_eq!(Model::from_params(&cfg, m.params.clone()).unwrap(), m);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::tiny();
        c.input_size = 48;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.channels.pop();
        assert!(build_model(&c, 0).is_err());
    }
}
