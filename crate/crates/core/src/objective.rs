//! Reconstruction objective: L1, SSIM and their weighted sum.

use cmd_autograd::{Graph, Real, SsimWindow, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::ImagePatch;
use crate::error::{CmdError, Result};

/// Dynamic range of images in `[0, 1]`.
pub const DYNAMIC_RANGE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_1: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_1: 1.0, lambda_s: 1.0 }
    }
}

impl LossWeights {
    pub fn new(lambda_1: f64, lambda_s: f64) -> Result<Self> {
        let w = Self { lambda_1, lambda_s };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_1) || !ok(self.lambda_s) {
            return Err(CmdError::config(format!("loss weights must be finite and nonnegative, got ({}, {})", self.lambda_1, self.lambda_s)));
        }
        if self.lambda_1 == 0.0 && self.lambda_s == 0.0 {
            return Err(CmdError::config("loss weights cannot both be zero"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WindowConfig {
    Uniform { size: usize },
    Gaussian { size: usize, sigma: f64 },
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig::Uniform { size: 11 }
    }
}

impl From<WindowConfig> for SsimWindow {
    fn from(w: WindowConfig) -> Self {
        match w {
            WindowConfig::Uniform { size } => SsimWindow::Uniform { size },
            WindowConfig::Gaussian { size, sigma } => SsimWindow::Gaussian { size, sigma },
        }
    }
}

/// Full objective configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub window: WindowConfig,
    /// Restrict the L1 term to masked pixels (ablation; SSIM stays global).
    pub masked_only: bool,
}

/// Record `lambda_1 * L1 + lambda_s * (1 - SSIM) / 2` of `xhat` against
/// `x0`. Zero-weighted terms are not recorded, so a single active term with
/// unit weight is bitwise equal to that term alone. `l1_weight` restricts
/// the L1 average to a pixel subset.
pub fn total_loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    xhat: Var,
    x0: &Tensor<T>,
    weights: LossWeights,
    window: SsimWindow,
    l1_weight: Option<&Tensor<T>>,
) -> Result<Var> {
    weights.validate()?;
    let mut terms = Vec::with_capacity(2);
    if weights.lambda_1 > 0.0 {
        let l1 = g.l1_loss(xhat, x0, l1_weight)?;
        terms.push(scaled(g, l1, weights.lambda_1));
    }
    if weights.lambda_s > 0.0 {
        let s = ssim_loss_graph(g, xhat, x0, window)?;
        terms.push(scaled(g, s, weights.lambda_s));
    }
    Ok(if terms.len() == 1 { terms[0] } else { g.add(terms[0], terms[1])? })
}

fn scaled<T: Real>(g: &mut Graph<'_, T>, v: Var, s: f64) -> Var {
    if s == 1.0 {
        v
    } else {
        g.scale(v, s)
    }
}

/// `(1 - SSIM) / 2` as a graph node.
pub fn ssim_loss_graph<T: Real>(g: &mut Graph<'_, T>, xhat: Var, x0: &Tensor<T>, window: SsimWindow) -> Result<Var> {
    let s = g.ssim(xhat, x0, window, DYNAMIC_RANGE)?;
    let neg = g.scale(s, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    Ok(g.scale(one_minus, 0.5))
}

fn pair(x0: &ImagePatch, xhat: &ImagePatch) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if x0.pixels.shape() != xhat.pixels.shape() {
        return Err(CmdError::Size { what: "reconstruction".into(), expected: format!("{:?}", x0.pixels.shape()), got: format!("{:?}", xhat.pixels.shape()) });
    }
    Ok((x0.to_batch(), xhat.to_batch()))
}

fn eval_scalar(x0: &ImagePatch, xhat: &ImagePatch, f: impl FnOnce(&mut Graph<'_, f32>, Var, &Tensor<f32>) -> Result<Var>) -> Result<f64> {
    let (a, b) = pair(x0, xhat)?;
    let mut g = Graph::new();
    let v = g.input(b);
    let out = f(&mut g, v, &a)?;
    Ok(g.value(out).item() as f64)
}

/// Mean absolute deviation over all pixels and channels.
pub fn l1_loss(x0: &ImagePatch, xhat: &ImagePatch) -> Result<f64> {
    eval_scalar(x0, xhat, |g, v, t| Ok(g.l1_loss(v, t, None)?))
}

/// Mean SSIM over valid sliding windows, in `[-1, 1]`.
pub fn ssim(x: &ImagePatch, y: &ImagePatch, window: SsimWindow) -> Result<f64> {
    let (a, b) = pair(x, y)?;
    Ok(cmd_autograd::ssim_value(&a, &b, window, DYNAMIC_RANGE)? as f64)
}

pub fn ssim_loss(x0: &ImagePatch, xhat: &ImagePatch, window: SsimWindow) -> Result<f64> {
    eval_scalar(x0, xhat, |g, v, t| ssim_loss_graph(g, v, t, window))
}

pub fn total_loss(x0: &ImagePatch, xhat: &ImagePatch, weights: LossWeights, window: SsimWindow) -> Result<f64> {
    eval_scalar(x0, xhat, |g, v, t| total_loss_graph(g, v, t, weights, window, None))
}
