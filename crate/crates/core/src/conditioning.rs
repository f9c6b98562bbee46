//! Timestep embedding, frozen image-level feature providers, condition
//! fusion and adaLN-Zero modulation.

use std::fs;
use std::path::PathBuf;

use cmd_autograd::{Graph, Init, ParamId, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::ParamSink;
use crate::data::ImagePatch;
use crate::error::{CmdError, Result};

/// Layer-norm epsilon shared by every conditioned block.
pub const LN_EPS: f64 = 1e-6;

/// Seed of the stub provider's frozen projection.
pub const STUB_SEED: u64 = 0x5EED_F00D;

/// Side of the average-pooled grid fed to the stub projection.
pub const STUB_POOL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// No image-level feature; the condition is the timestep alone.
    #[default]
    None,
    /// Frozen random projection of pooled pixels.
    Stub,
    /// Precomputed `<stem>.feat` files.
    External,
}

/// Which frozen encoder supplies `z`, and its width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSource {
    pub provider: ProviderKind,
    pub feature_dim: usize,
    /// Directory of `<stem>.feat` files for the external provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dir: Option<PathBuf>,
}

impl Default for ConditionSource {
    fn default() -> Self {
        Self { provider: ProviderKind::None, feature_dim: 1024, feature_dir: None }
    }
}

impl ConditionSource {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn stub(feature_dim: usize) -> Self {
        Self { provider: ProviderKind::Stub, feature_dim, feature_dir: None }
    }

    pub fn external(dir: impl Into<PathBuf>, feature_dim: usize) -> Self {
        Self { provider: ProviderKind::External, feature_dim, feature_dir: Some(dir.into()) }
    }
}

/// A constructed, frozen provider. It owns no trainable parameters.
#[derive(Debug, Clone)]
pub struct ConditionProvider {
    source: ConditionSource,
    /// `[3 * STUB_POOL^2, feature_dim]`, stub only.
    projection: Vec<f32>,
}

impl ConditionProvider {
    pub fn new(source: &ConditionSource) -> Result<Self> {
        if source.provider != ProviderKind::None && source.feature_dim == 0 {
            return Err(CmdError::config("condition feature_dim must be >= 1"));
        }
        let projection = match source.provider {
            ProviderKind::Stub => {
                let fan_in = 3 * STUB_POOL * STUB_POOL;
                let scale = 1.0 / (fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(STUB_SEED);
                (0..fan_in * source.feature_dim)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        (v * scale) as f32
                    })
                    .collect()
            }
            ProviderKind::External => {
                if source.feature_dir.is_none() {
                    return Err(CmdError::config("external condition provider needs feature_dir"));
                }
                Vec::new()
            }
            ProviderKind::None => Vec::new(),
        };
        Ok(Self { source: source.clone(), projection })
    }

    pub fn source(&self) -> &ConditionSource {
        &self.source
    }

    pub fn is_enabled(&self) -> bool {
        self.source.provider != ProviderKind::None
    }

    /// Image-level feature `z` of `img`, or `None` for the absent provider.
    pub fn encode(&self, img: &ImagePatch) -> Result<Option<Vec<f32>>> {
        match self.source.provider {
            ProviderKind::None => Ok(None),
            ProviderKind::Stub => Ok(Some(self.stub_feature(img))),
            ProviderKind::External => self.external_feature(&img.source_id).map(Some),
        }
    }

    /// `[n, feature_dim]` features of a batch, or `None` when disabled.
    pub fn encode_batch(&self, images: &[ImagePatch]) -> Result<Option<Tensor<f32>>> {
        if !self.is_enabled() {
            return Ok(None);
        }
        let mut data = Vec::with_capacity(images.len() * self.source.feature_dim);
        for img in images {
            data.extend(self.encode(img)?.expect("enabled provider"));
        }
        Ok(Some(Tensor::from_vec(&[images.len(), self.source.feature_dim], data)?))
    }

    fn stub_feature(&self, img: &ImagePatch) -> Vec<f32> {
        let pooled = area_pool(img, STUB_POOL);
        let d = self.source.feature_dim;
        let mut out = vec![0.0f32; d];
        for (row, &p) in self.projection.chunks_exact(d).zip(&pooled) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += p * w;
            }
        }
        out
    }

    fn external_feature(&self, stem: &str) -> Result<Vec<f32>> {
        let dir = self.source.feature_dir.as_ref().expect("checked at construction");
        let path = dir.join(format!("{stem}.feat"));
        let bytes = fs::read(&path).map_err(|e| CmdError::Provider(format!("{}: {e}", path.display())))?;
        if bytes.len() != 4 * self.source.feature_dim {
            return Err(CmdError::Provider(format!(
                "{}: expected {} floats, found {} bytes",
                path.display(),
                self.source.feature_dim,
                bytes.len()
            )));
        }
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    }
}

/// Average over `side x side` near-equal bins, RGB interleaved.
fn area_pool(img: &ImagePatch, side: usize) -> Vec<f32> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let px = img.pixels.data();
    let mut out = vec![0.0f32; side * side * 3];
    for by in 0..side {
        let (y0, y1) = (by * h / side, ((by + 1) * h / side).max(by * h / side + 1).min(h));
        for bx in 0..side {
            let (x0, x1) = (bx * w / side, ((bx + 1) * w / side).max(bx * w / side + 1).min(w));
            let n = ((y1 - y0) * (x1 - x0)) as f32;
            for ch in 0..3 {
                let src = ch.min(c - 1);
                let mut s = 0.0f32;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += px[(y * w + x) * c + src];
                    }
                }
                out[(by * side + bx) * 3 + ch] = s / n;
            }
        }
    }
    out
}

/// Sinusoidal features `[cos(t f_i), sin(t f_i)]` with
/// `f_i = 10000^(-i / (dim/2))`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(CmdError::domain(format!("timestep embedding width must be even, got {dim}")));
    }
    let half = dim / 2;
    let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
    let (mut cos, mut sin) = (Vec::with_capacity(dim), Vec::with_capacity(half));
    for f in freqs {
        cos.push((t * f).cos());
        sin.push((t * f).sin());
    }
    cos.extend(sin);
    Ok(cos)
}

/// Parameters of `phi_t` (two-layer MLP on sinusoidal features) and
/// `phi_z` (zero-initialised linear map of the frozen feature).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionParams {
    pub freq_dim: usize,
    pub cond_dim: usize,
    pub feature_dim: usize,
    pub t_w1: ParamId,
    pub t_b1: ParamId,
    pub t_w2: ParamId,
    pub t_b2: ParamId,
    pub z_w: ParamId,
    pub z_b: ParamId,
}

impl ConditionParams {
    pub fn register<S: ParamSink + ?Sized>(sink: &mut S, freq_dim: usize, cond_dim: usize, feature_dim: usize) -> Self {
        let std = Init::TruncNormal(0.02);
        Self {
            freq_dim,
            cond_dim,
            feature_dim,
            t_w1: sink.add("cond.t_mlp.0.weight", &[freq_dim, cond_dim], std),
            t_b1: sink.add("cond.t_mlp.0.bias", &[cond_dim], Init::Zeros),
            t_w2: sink.add("cond.t_mlp.2.weight", &[cond_dim, cond_dim], std),
            t_b2: sink.add("cond.t_mlp.2.bias", &[cond_dim], Init::Zeros),
            z_w: sink.add("cond.z_proj.weight", &[feature_dim, cond_dim], Init::Zeros),
            z_b: sink.add("cond.z_proj.bias", &[cond_dim], Init::Zeros),
        }
    }
}

/// The recorded pieces of `c = phi_t(t) + phi_z(z)`.
#[derive(Debug, Clone, Copy)]
pub struct ConditionVars {
    pub c: Var,
    pub t_embed: Var,
    pub z_embed: Option<Var>,
}

/// `phi_t(t)` for a batch of timesteps, shape `[n, cond_dim]`.
pub fn timestep_embedding<T: Real>(g: &mut Graph<'_, T>, p: &ConditionParams, timesteps: &[u32]) -> Result<Var> {
    let mut freq = Vec::with_capacity(timesteps.len() * p.freq_dim);
    for &t in timesteps {
        freq.extend(sinusoidal_embedding(t as f64, p.freq_dim)?.into_iter().map(T::lit));
    }
    let x = g.constant(Tensor::from_vec(&[timesteps.len(), p.freq_dim], freq)?);
    let (w1, b1, w2, b2) = (g.param(p.t_w1), g.param(p.t_b1), g.param(p.t_w2), g.param(p.t_b2));
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.silu(h);
    Ok(g.linear(h, w2, Some(b2))?)
}

/// `c = phi_t(t) + phi_z(z)`; with `z` absent, `c = phi_t(t)` exactly.
pub fn fuse_condition<T: Real>(g: &mut Graph<'_, T>, p: &ConditionParams, t_embed: Var, z: Option<&Tensor<T>>) -> Result<ConditionVars> {
    let Some(z) = z else {
        return Ok(ConditionVars { c: t_embed, t_embed, z_embed: None });
    };
    let n = g.shape(t_embed)[0];
    if z.shape() != [n, p.feature_dim] {
        return Err(CmdError::Size { what: "condition feature".into(), expected: format!("[{n}, {}]", p.feature_dim), got: format!("{:?}", z.shape()) });
    }
    let zv = g.constant(z.clone());
    let (w, b) = (g.param(p.z_w), g.param(p.z_b));
    let z_embed = g.linear(zv, w, Some(b))?;
    let c = g.add(t_embed, z_embed)?;
    Ok(ConditionVars { c, t_embed, z_embed: Some(z_embed) })
}

/// adaLN-Zero projection `silu(c) -> (shift, scale, gate)` of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaLnParams {
    pub width: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl AdaLnParams {
    pub fn register<S: ParamSink + ?Sized>(sink: &mut S, prefix: &str, cond_dim: usize, width: usize) -> Self {
        Self {
            width,
            w: sink.add(&format!("{prefix}.ada.weight"), &[cond_dim, 3 * width], Init::Zeros),
            b: sink.add(&format!("{prefix}.ada.bias"), &[3 * width], Init::Zeros),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub shift: Var,
    pub scale: Var,
    pub gate: Var,
}

/// Project the activated condition `silu(c)` (`[n, cond_dim]`) into the
/// block's shift, scale and gate, each `[n, width]`.
pub fn adaln_projection<T: Real>(g: &mut Graph<'_, T>, c_act: Var, p: &AdaLnParams) -> Result<Modulation> {
    let (w, b) = (g.param(p.w), g.param(p.b));
    let m = g.linear(c_act, w, Some(b))?;
    Ok(Modulation { shift: g.narrow(m, 0, p.width)?, scale: g.narrow(m, p.width, p.width)?, gate: g.narrow(m, 2 * p.width, p.width)? })
}

/// `(1 + scale) * LN(u) + shift`; the scale projection predicts `gamma - 1`
/// so that a zero projection is the plain normalisation.
pub fn modulated_norm<T: Real>(g: &mut Graph<'_, T>, u: Var, m: &Modulation) -> Result<Var> {
    let width = *g.shape(u).last().unwrap_or(&0);
    if g.shape(m.scale)[1] != width {
        return Err(CmdError::Size { what: "modulation width".into(), expected: width.to_string(), got: g.shape(m.scale)[1].to_string() });
    }
    let n = g.layer_norm(u, LN_EPS);
    let gamma = g.add_scalar(m.scale, 1.0);
    Ok(g.modulate(n, gamma, m.shift)?)
}

/// `gate(c) * (gamma(c) * LN(u) + beta(c))`, the modulated residual branch
/// in its direct form.
pub fn adaln_modulate<T: Real>(g: &mut Graph<'_, T>, u: Var, c_act: Var, p: &AdaLnParams) -> Result<Var> {
    let m = adaln_projection(g, c_act, p)?;
    let h = modulated_norm(g, u, &m)?;
    let zero = g.constant(Tensor::zeros(g.shape(h)));
    Ok(g.gated_residual(zero, h, m.gate)?)
}

/// A materialised condition for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    pub values: Vec<f32>,
    pub t_embed: Vec<f32>,
    pub z_embed: Option<Vec<f32>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_shape_and_parity() {
        assert_eq!(sinusoidal_embedding(3.0, 64).unwrap().len(), 64);
        assert!(sinusoidal_embedding(3.0, 7).is_err());
        let e0 = sinusoidal_embedding(0.0, 8).unwrap();
        assert_eq!(e0, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn stub_is_frozen_and_pools_exactly() {
        let src = ConditionSource::stub(32);
        let a = ConditionProvider::new(&src).unwrap();
        let b = ConditionProvider::new(&src).unwrap();
        let img = ImagePatch::filled(64, 64, 3, 0.25, "x");
        assert_eq!(a.encode(&img).unwrap(), b.encode(&img).unwrap());
        assert!(area_pool(&img, 16).iter().all(|&v| v == 0.25));
        assert!(ConditionProvider::new(&ConditionSource::none()).unwrap().encode(&img).unwrap().is_none());
    }

    #[test]
    fn external_reads_little_endian_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let vals = [1.5f32, -2.0, 0.25];
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("a.feat"), bytes).unwrap();
        let p = ConditionProvider::new(&ConditionSource::external(dir.path(), 3)).unwrap();
        let img = ImagePatch::filled(32, 32, 3, 0.0, "a");
        assert_eq!(p.encode(&img).unwrap().unwrap(), vals.to_vec());
        let missing = ImagePatch::filled(32, 32, 3, 0.0, "b");
        assert!(matches!(p.encode(&missing), Err(CmdError::Provider(_))));
    }
}
