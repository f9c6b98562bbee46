//! Timestep-controlled patch masking: the corruption process of the
//! masked-diffusion objective.

use cmd_autograd::Tensor;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImagePatch;
use crate::error::{CmdError, Result};

/// A timestep `t` on a horizon of `total` steps, `1 <= t <= total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepSpec {
    pub t: u32,
    pub total: u32,
}

impl TimestepSpec {
    pub fn new(t: u32, total: u32) -> Result<Self> {
        if total == 0 || t == 0 || t > total {
            return Err(CmdError::domain(format!("timestep {t} outside [1, {total}]")));
        }
        Ok(Self { t, total })
    }

    /// Number of masked patches out of `n`, i.e. `floor(t n / (T + 1))`
    /// evaluated exactly in integer arithmetic.
    pub fn masked_count(&self, n: usize) -> usize {
        (self.t as u128 * n as u128 / (self.total as u128 + 1)) as usize
    }
}

/// Masking ratio `r_t = t / (T + 1)`, always strictly inside (0, 1).
pub fn mask_ratio(spec: TimestepSpec) -> Result<f64> {
    let spec = TimestepSpec::new(spec.t, spec.total)?;
    Ok(spec.t as f64 / (spec.total as f64 + 1.0))
}

/// Patch-level visibility grid; `true` is visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub hp: usize,
    pub wp: usize,
    pub patch_size: usize,
    pub visible: Vec<bool>,
}

impl MaskGrid {
    pub fn all_visible(hp: usize, wp: usize, patch_size: usize) -> Self {
        Self { hp, wp, patch_size, visible: vec![true; hp * wp] }
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.visible.iter().filter(|&&v| !v).count()
    }

    pub fn is_visible(&self, py: usize, px: usize) -> bool {
        self.visible[py * self.wp + px]
    }

    /// Pixel side lengths covered by the grid.
    pub fn pixel_dims(&self) -> (usize, usize) {
        (self.hp * self.patch_size, self.wp * self.patch_size)
    }

    /// Broadcast to an `h x w` 0/1 pixel mask.
    pub fn pixel_mask(&self) -> Vec<f32> {
        let (h, w) = self.pixel_dims();
        let p = self.patch_size;
        (0..h * w).map(|i| if self.is_visible(i / w / p, i % w / p) { 1.0 } else { 0.0 }).collect()
    }
}

/// Grid with exactly `count` masked patches chosen uniformly without
/// replacement.
pub fn sample_mask_count<R: Rng + ?Sized>(hp: usize, wp: usize, patch_size: usize, count: usize, rng: &mut R) -> Result<MaskGrid> {
    if hp == 0 || wp == 0 || patch_size == 0 {
        return Err(CmdError::domain("mask grid dimensions and patch size must be >= 1"));
    }
    let n = hp * wp;
    if count > n {
        return Err(CmdError::domain(format!("cannot mask {count} of {n} patches")));
    }
    let mut grid = MaskGrid::all_visible(hp, wp, patch_size);
    for i in index::sample(rng, n, count) {
        grid.visible[i] = false;
    }
    Ok(grid)
}

/// Grid with `floor(ratio * hp * wp)` masked patches.
pub fn sample_mask_grid<R: Rng + ?Sized>(hp: usize, wp: usize, patch_size: usize, ratio: f64, rng: &mut R) -> Result<MaskGrid> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(CmdError::domain(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let count = (ratio * (hp * wp) as f64).floor() as usize;
    sample_mask_count(hp, wp, patch_size, count, rng)
}

/// Grid for timestep `spec` over an image of side `h x w`.
pub fn sample_timestep_mask<R: Rng + ?Sized>(h: usize, w: usize, patch_size: usize, spec: TimestepSpec, rng: &mut R) -> Result<MaskGrid> {
    if patch_size == 0 || !h.is_multiple_of(patch_size) || !w.is_multiple_of(patch_size) {
        return Err(CmdError::Size { what: "image".into(), expected: format!("sides divisible by {patch_size}"), got: format!("{h}x{w}") });
    }
    let (hp, wp) = (h / patch_size, w / patch_size);
    sample_mask_count(hp, wp, patch_size, spec.masked_count(hp * wp), rng)
}

fn check_grid(h: usize, w: usize, grid: &MaskGrid) -> Result<()> {
    if grid.pixel_dims() != (h, w) {
        let (gh, gw) = grid.pixel_dims();
        return Err(CmdError::Size { what: "mask grid".into(), expected: format!("{h}x{w} pixels"), got: format!("{gh}x{gw}") });
    }
    Ok(())
}

fn zero_masked(data: &mut [f32], h: usize, w: usize, c: usize, grid: &MaskGrid) {
    let p = grid.patch_size;
    for y in 0..h {
        for x in 0..w {
            if !grid.is_visible(y / p, x / p) {
                data[(y * w + x) * c..(y * w + x + 1) * c].fill(0.0);
            }
        }
    }
}

/// `x_t = m_t * x_0`: masked patches are zero-filled, visible pixels are
/// copied unchanged.
pub fn apply_mask(img: &ImagePatch, grid: &MaskGrid) -> Result<ImagePatch> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    check_grid(h, w, grid)?;
    let mut pixels = img.pixels.clone();
    zero_masked(pixels.data_mut(), h, w, c, grid);
    ImagePatch::new(pixels, img.source_id.clone())
}

/// Batched form of [`apply_mask`] over `[n, h, w, c]` with one grid per sample.
pub fn apply_mask_batch(batch: &Tensor<f32>, grids: &[MaskGrid]) -> Result<Tensor<f32>> {
    let (n, h, w, c) = batch.dims4()?;
    if grids.len() != n {
        return Err(CmdError::Size { what: "mask grids".into(), expected: n.to_string(), got: grids.len().to_string() });
    }
    let mut out = batch.clone();
    for (sample, grid) in out.data_mut().chunks_exact_mut(h * w * c).zip(grids) {
        check_grid(h, w, grid)?;
        zero_masked(sample, h, w, c, grid);
    }
    Ok(out)
}
