//! Dice, precision and boundary F1 over binary masks, with percentile
//! bootstrap confidence intervals over images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{CmdError, Result};

/// Default resample count for confidence intervals.
pub const DEFAULT_RESAMPLES: usize = 1000;
/// Default boundary-matching tolerance in pixels.
pub const DEFAULT_BF1_TOL: f64 = 2.0;

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CmdError::Size { what: "mask".into(), expected: (height * width).to_string(), got: data.len().to_string() });
        }
        Ok(Self { height, width, data })
    }

    /// Foreground (nonzero label) of a label map.
    pub fn foreground(map: &LabelMap) -> Self {
        Self { height: map.height, width: map.width, data: map.foreground() }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn transpose(&self) -> Self {
        let data = (0..self.width).flat_map(|x| (0..self.height).map(move |y| (y, x))).map(|(y, x)| self.get(y, x)).collect();
        Self { height: self.width, width: self.height, data }
    }

    /// Foreground pixels with a background 4-neighbour or lying on the
    /// image edge.
    pub fn boundary(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                self.data[i]
                    && (y == 0 || x == 0 || y + 1 == h || x + 1 == w || !self.get(y - 1, x) || !self.get(y + 1, x) || !self.get(y, x - 1) || !self.get(y, x + 1))
            })
            .collect();
        Self { height: h, width: w, data }
    }
}

fn check_pair(p: &BinaryMask, g: &BinaryMask) -> Result<()> {
    if (p.height, p.width) != (g.height, g.width) {
        return Err(CmdError::Size { what: "prediction mask".into(), expected: format!("{}x{}", g.height, g.width), got: format!("{}x{}", p.height, p.width) });
    }
    Ok(())
}

fn overlap(p: &BinaryMask, g: &BinaryMask) -> usize {
    p.data.iter().zip(&g.data).filter(|(a, b)| **a && **b).count()
}

/// `2|P∩G| / (|P|+|G|)`, 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_pair(pred, gt)?;
    let denom = pred.count() + gt.count();
    Ok(if denom == 0 { 1.0 } else { 2.0 * overlap(pred, gt) as f64 / denom as f64 })
}

/// `|P∩G| / |P|`; an empty prediction scores 1 against an empty target and
/// 0 otherwise.
pub fn precision(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_pair(pred, gt)?;
    let p = pred.count();
    Ok(match (p, gt.count()) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => overlap(pred, gt) as f64 / p as f64,
    })
}

/// Fraction of `from` pixels with a `to` pixel within Euclidean distance
/// `tol`.
fn matched_fraction(from: &BinaryMask, to: &BinaryMask, tol: f64) -> f64 {
    let r = tol.floor() as isize;
    let tol2 = tol * tol;
    let (h, w) = (from.height as isize, from.width as isize);
    let (mut total, mut hit) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !from.get(y as usize, x as usize) {
                continue;
            }
            total += 1;
            let found = (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    yy >= 0 && xx >= 0 && yy < h && xx < w && ((dy * dy + dx * dx) as f64) <= tol2 && to.get(yy as usize, xx as usize)
                })
            });
            hit += found as usize;
        }
    }
    hit as f64 / total as f64
}

/// Harmonic mean of boundary precision and recall at pixel tolerance
/// `tol`. Two empty boundaries score 1, exactly one empty boundary scores 0.
pub fn boundary_f1(pred: &BinaryMask, gt: &BinaryMask, tol: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    if !(tol >= 0.0 && tol.is_finite()) {
        return Err(CmdError::domain(format!("boundary tolerance must be finite and >= 0, got {tol}")));
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    match (bp.count(), bg.count()) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let p = matched_fraction(&bp, &bg, tol);
    let r = matched_fraction(&bg, &bp, tol);
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric_name: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

/// Linear-interpolation percentile of sorted values, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile 95% interval of the mean from `n` resamples of whole images.
pub fn bootstrap_ci(name: &str, scores: &[f64], n: usize, seed: u64) -> Result<MetricReport> {
    if scores.is_empty() {
        return Err(CmdError::domain("bootstrap needs at least one score"));
    }
    if n == 0 {
        return Err(CmdError::domain("bootstrap needs at least one resample"));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..n)
        .map(|_| (0..scores.len()).map(|_| scores[rng.random_range(0..scores.len())]).sum::<f64>() / scores.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    Ok(MetricReport { metric_name: name.into(), mean, ci_low: percentile(&means, 0.025), ci_high: percentile(&means, 0.975), n_resamples: n, seed })
}

/// Scores of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub dice: f64,
    pub precision: f64,
    pub boundary_f1: f64,
}

pub fn score_image(pred: &BinaryMask, gt: &BinaryMask, tol: f64) -> Result<ImageScores> {
    Ok(ImageScores { dice: dice(pred, gt)?, precision: precision(pred, gt)?, boundary_f1: boundary_f1(pred, gt, tol)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub metrics: Vec<MetricReport>,
    pub bf1_tolerance: f64,
    pub n_images: usize,
    pub per_image: Vec<(String, ImageScores)>,
    /// Free-form provenance such as checkpoint digest and head file.
    pub provenance: std::collections::BTreeMap<String, String>,
}

/// Score every `(id, pred, gt)` triple and aggregate with bootstrap CIs.
pub fn evaluate_masks(pairs: &[(String, BinaryMask, BinaryMask)], tol: f64, n_resamples: usize, seed: u64) -> Result<EvaluationReport> {
    let per_image = pairs.iter().map(|(id, p, g)| Ok((id.clone(), score_image(p, g, tol)?))).collect::<Result<Vec<_>>>()?;
    let column = |f: fn(&ImageScores) -> f64| per_image.iter().map(|(_, s)| f(s)).collect::<Vec<_>>();
    let metrics = vec![
        bootstrap_ci("dice", &column(|s| s.dice), n_resamples, seed)?,
        bootstrap_ci("precision", &column(|s| s.precision), n_resamples, seed)?,
        bootstrap_ci("boundary_f1", &column(|s| s.boundary_f1), n_resamples, seed)?,
    ];
    Ok(EvaluationReport { metrics, bf1_tolerance: tol, n_images: pairs.len(), per_image, provenance: Default::default() })
}

impl EvaluationReport {
    pub fn metric(&self, name: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.metric_name == name)
    }
}
