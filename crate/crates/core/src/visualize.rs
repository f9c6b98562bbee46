//! K-means clustering of dense features and colour overlays.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{to_u8, ImagePatch};
use crate::error::{CmdError, Result};
use crate::features::DenseFeatureMap;

pub const DEFAULT_MAX_ITER: usize = 100;

/// Overlay colours indexed by label (wrapping). Label 0 is drawn too, so
/// callers that want background left untouched pass `skip_zero`.
pub const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [128, 128, 128],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub k: usize,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub normalize: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 4, seed: 0, max_iter: DEFAULT_MAX_ITER, normalize: true }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm over per-pixel vectors with k-means++ seeding.
pub fn kmeans_cluster(f: &DenseFeatureMap, cfg: &KMeansConfig) -> Result<ClusterMap> {
    let s = f.values.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let n = h * w;
    if cfg.k < 2 {
        return Err(CmdError::domain(format!("k-means needs K >= 2, got {}", cfg.k)));
    }
    if n == 0 || c == 0 {
        return Err(CmdError::domain("empty feature map"));
    }
    if cfg.k > n {
        return Err(CmdError::domain(format!("K = {} exceeds the {n} pixels", cfg.k)));
    }
    let points: Vec<Vec<f64>> = f
        .values
        .data()
        .chunks_exact(c)
        .map(|v| {
            let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if cfg.normalize && norm > 0.0 {
                v.iter().map(|x| x / norm).collect()
            } else {
                v
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < cfg.k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(dist2(p, centers.last().expect("nonempty")));
        }
    }

    let assign = |centers: &[Vec<f64>]| -> (Vec<u32>, f64) {
        let mut inertia = 0.0;
        let labels = points
            .iter()
            .map(|p| {
                let (best, d) = centers.iter().enumerate().map(|(j, m)| (j, dist2(p, m))).fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                inertia += d;
                best as u32
            })
            .collect();
        (labels, inertia)
    };
    let (mut labels, mut inertia) = assign(&centers);
    let mut history = vec![inertia];
    for _ in 0..cfg.max_iter {
        let mut sums = vec![vec![0.0; c]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l as usize] += 1;
            sums[l as usize].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for (j, (sum, &cnt)) in sums.into_iter().zip(&counts).enumerate() {
            // an emptied cluster keeps its previous centre
            if cnt > 0 {
                centers[j] = sum.into_iter().map(|s| s / cnt as f64).collect();
            }
        }
        let (next, next_inertia) = assign(&centers);
        history.push(next_inertia);
        inertia = next_inertia;
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(ClusterMap { height: h, width: w, labels, k: cfg.k, inertia, history })
}

/// Alpha-blend palette colours over an image. `labels` is row-major with
/// the image's spatial size; with `skip_zero` label 0 leaves pixels as is.
pub fn render_overlay(img: &ImagePatch, labels: &[u32], alpha: f64, skip_zero: bool) -> Result<Vec<u8>> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if labels.len() != h * w {
        return Err(CmdError::Size { what: "overlay labels".into(), expected: (h * w).to_string(), got: labels.len().to_string() });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CmdError::domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let px = img.pixels.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for (i, &l) in labels.iter().enumerate() {
        for ch in 0..3 {
            let base = to_u8(px[i * c + ch.min(c - 1)]);
            let v = if skip_zero && l == 0 {
                base
            } else {
                let col = PALETTE[l as usize % PALETTE.len()][ch] as f64;
                (base as f64 * (1.0 - alpha) + col * alpha).round() as u8
            };
            out.push(v);
        }
    }
    Ok(out)
}

/// A cluster map drawn with palette colours only.
pub fn render_labels(labels: &[u32]) -> Vec<u8> {
    labels.iter().flat_map(|&l| PALETTE[l as usize % PALETTE.len()]).collect()
}
