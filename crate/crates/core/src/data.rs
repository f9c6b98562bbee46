//! Corpus ingestion, pretraining augmentation, the synthetic nuclei corpus
//! and few-shot subset sampling.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use cmd_autograd::{resize_bilinear, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CmdError, Result};

/// An `h x w x c` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    /// Shape `[h, w, c]`.
    pub pixels: Tensor<f32>,
    pub source_id: String,
}

impl ImagePatch {
    pub fn new(pixels: Tensor<f32>, source_id: impl Into<String>) -> Result<Self> {
        if pixels.rank() != 3 {
            return Err(CmdError::Size { what: "rank".into(), expected: "3 (h, w, c)".into(), got: format!("{:?}", pixels.shape()) });
        }
        Ok(Self { pixels, source_id: source_id.into() })
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f32, source_id: impl Into<String>) -> Self {
        Self { pixels: Tensor::full(&[h, w, c], v), source_id: source_id.into() }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// View as a unit batch `[1, h, w, c]`.
    pub fn to_batch(&self) -> Tensor<f32> {
        self.pixels.clone().reshape(&[1, self.height(), self.width(), self.channels()]).expect("rank-3 image")
    }

    /// Inverse of [`ImagePatch::to_batch`] for sample `i` of a batch.
    pub fn from_batch(batch: &Tensor<f32>, i: usize, source_id: impl Into<String>) -> Result<Self> {
        let (_, h, w, c) = batch.dims4()?;
        Ok(Self { pixels: batch.sample(i).reshape(&[h, w, c])?, source_id: source_id.into() })
    }
}

/// Stack equally sized images into a `[n, h, w, c]` batch.
pub fn batch_images(images: &[ImagePatch]) -> Result<Tensor<f32>> {
    let items: Vec<Tensor<f32>> = images.iter().map(ImagePatch::to_batch).collect();
    Ok(Tensor::stack(&items)?)
}

/// Per-pixel class indices of an `h x w` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(CmdError::Size { what: "label map".into(), expected: format!("{}", height * width), got: format!("{}", labels.len()) });
        }
        Ok(Self { height, width, labels })
    }

    /// Binary foreground (`label != 0`).
    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    pub fn num_classes_seen(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: ImagePatch,
    pub mask: LabelMap,
}

impl LabeledSample {
    pub fn new(image: ImagePatch, mask: LabelMap) -> Result<Self> {
        if mask.height != image.height() || mask.width != image.width() {
            return Err(CmdError::Size {
                what: format!("mask of `{}`", image.source_id),
                expected: format!("{}x{}", image.height(), image.width()),
                got: format!("{}x{}", mask.height, mask.width),
            });
        }
        Ok(Self { image, mask })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetItem {
    Unlabeled(ImagePatch),
    Labeled(LabeledSample),
}

impl DatasetItem {
    pub fn image(&self) -> &ImagePatch {
        match self {
            DatasetItem::Unlabeled(img) => img,
            DatasetItem::Labeled(s) => &s.image,
        }
    }

    pub fn mask(&self) -> Option<&LabelMap> {
        match self {
            DatasetItem::Unlabeled(_) => None,
            DatasetItem::Labeled(s) => Some(&s.mask),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchDataset {
    pub items: Vec<DatasetItem>,
    pub split: Split,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImagePatch> {
        self.items.iter().map(DatasetItem::image)
    }

    /// Labeled samples in order; errors if any item lacks a mask.
    pub fn labeled(&self) -> Result<Vec<&LabeledSample>> {
        self.items
            .iter()
            .map(|it| match it {
                DatasetItem::Labeled(s) => Ok(s),
                DatasetItem::Unlabeled(img) => Err(CmdError::MissingMask(img.source_id.clone())),
            })
            .collect()
    }

    /// Items `range`, keeping the split tag.
    pub fn slice(&self, range: std::ops::Range<usize>, split: Split) -> PatchDataset {
        PatchDataset { items: self.items[range].to_vec(), split }
    }

    /// Split into `(train, test)` with the first `n_train` items in train.
    pub fn split_at(&self, n_train: usize) -> (PatchDataset, PatchDataset) {
        let n = n_train.min(self.len());
        (self.slice(0..n, Split::Train), self.slice(n..self.len(), Split::Test))
    }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CmdError::io(format!("reading {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Load `root/images/*.png` (and `root/masks/*.png` when `labeled`) in
/// lexicographic filename order. The split tag is `test` when the directory
/// is named `test`, otherwise `train`.
pub fn load_corpus(root: &Path, labeled: bool) -> Result<PatchDataset> {
    let split = if root.file_name().is_some_and(|n| n == "test") { Split::Test } else { Split::Train };
    let images = png_files(&root.join("images"))?;
    let mut items = Vec::with_capacity(images.len());
    for path in images {
        let id = stem(&path);
        let image = read_png_image(&path, &id)?;
        if labeled {
            let mask_path = root.join("masks").join(format!("{id}.png"));
            if !mask_path.exists() {
                return Err(CmdError::MissingMask(id));
            }
            let mask = read_png_mask(&mask_path)?;
            items.push(DatasetItem::Labeled(LabeledSample::new(image, mask)?));
        } else {
            items.push(DatasetItem::Unlabeled(image));
        }
    }
    Ok(PatchDataset { items, split })
}

/// Write a dataset in the layout read by [`load_corpus`].
pub fn save_corpus(dataset: &PatchDataset, root: &Path) -> Result<()> {
    let img_dir = root.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| CmdError::io(format!("creating {}", img_dir.display()), e))?;
    for item in &dataset.items {
        let img = item.image();
        write_png_image(&img_dir.join(format!("{}.png", img.source_id)), img)?;
        if let Some(mask) = item.mask() {
            let mask_dir = root.join("masks");
            fs::create_dir_all(&mask_dir).map_err(|e| CmdError::io(format!("creating {}", mask_dir.display()), e))?;
            write_png_mask(&mask_dir.join(format!("{}.png", img.source_id)), mask)?;
        }
    }
    Ok(())
}

fn decode_png(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let err = |msg: String| CmdError::Decode { path: path.to_path_buf(), msg };
    let file = File::open(path).map_err(|e| CmdError::io(format!("opening {}", path.display()), e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(err("unexpanded palette".into())),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let n = w * h * channels;
    let values: Vec<f32> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..2 * n].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0).collect(),
        png::BitDepth::Eight => buf[..n].iter().map(|&b| b as f32 / 255.0).collect(),
        other => return Err(err(format!("unsupported bit depth {other:?}"))),
    };
    Ok((h, w, channels, values))
}

/// Read a PNG as RGB in `[0, 1]` (grey is replicated, alpha dropped).
pub fn read_png_image(path: &Path, source_id: &str) -> Result<ImagePatch> {
    let (h, w, c, v) = decode_png(path)?;
    let mut rgb = Vec::with_capacity(h * w * 3);
    for px in v.chunks_exact(c) {
        match c {
            1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
            _ => rgb.extend_from_slice(&px[..3]),
        }
    }
    ImagePatch::new(Tensor::from_vec(&[h, w, 3], rgb)?, source_id)
}

/// Read a single-channel index PNG.
pub fn read_png_mask(path: &Path) -> Result<LabelMap> {
    let (h, w, c, v) = decode_png(path)?;
    if c != 1 {
        return Err(CmdError::Decode { path: path.to_path_buf(), msg: format!("mask must be single-channel, found {c} channels") });
    }
    let labels = v.iter().map(|&x| (x * 255.0).round() as u32).collect();
    LabelMap::new(h, w, labels)
}

fn encode_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| CmdError::io(format!("creating {}", path.display()), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| CmdError::io(format!("writing {}", path.display()), std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(data).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png_image(path: &Path, img: &ImagePatch) -> Result<()> {
    let bytes: Vec<u8> = img.pixels.data().iter().map(|&v| to_u8(v)).collect();
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(CmdError::domain(format!("cannot write {c}-channel PNG"))),
    };
    encode_png(path, img.width(), img.height(), color, &bytes)
}

/// Write an 8-bit RGB raster.
pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    encode_png(path, width, height, png::ColorType::Rgb, rgb)
}

pub fn write_png_mask(path: &Path, mask: &LabelMap) -> Result<()> {
    let bytes: Vec<u8> = mask.labels.iter().map(|&l| l.min(255) as u8).collect();
    encode_png(path, mask.width, mask.height, png::ColorType::Grayscale, &bytes)
}

/// Pretraining augmentation: with probability 0.8 a uniformly placed
/// `target x target` crop, otherwise the whole patch bilinearly resized.
pub fn mixed_resize<R: Rng + ?Sized>(img: &ImagePatch, target: usize, rng: &mut R) -> Result<ImagePatch> {
    const CROP_PROBABILITY: f64 = 0.8;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if h < target || w < target || target == 0 {
        return Err(CmdError::Size { what: format!("`{}`", img.source_id), expected: format!("sides >= {target}"), got: format!("{h}x{w}") });
    }
    if rng.random_bool(CROP_PROBABILITY) {
        let oy = rng.random_range(0..=h - target);
        let ox = rng.random_range(0..=w - target);
        let src = img.pixels.data();
        let mut out = Vec::with_capacity(target * target * c);
        for y in oy..oy + target {
            out.extend_from_slice(&src[(y * w + ox) * c..(y * w + ox + target) * c]);
        }
        ImagePatch::new(Tensor::from_vec(&[target, target, c], out)?, img.source_id.clone())
    } else {
        let resized = resize_bilinear(&img.to_batch(), target, target)?;
        let pixels = resized.map(|v| v.clamp(0.0, 1.0)).reshape(&[target, target, c])?;
        ImagePatch::new(pixels, img.source_id.clone())
    }
}

/// Exactly `k` items drawn without replacement, deterministic in `seed`,
/// returned in dataset order.
pub fn sample_fewshot(dataset: &PatchDataset, k: usize, seed: u64) -> Result<PatchDataset> {
    if k == 0 || k > dataset.len() {
        return Err(CmdError::domain(format!("cannot draw {k} shots from {} samples", dataset.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, dataset.len(), k).into_vec();
    picked.sort_unstable();
    Ok(PatchDataset { items: picked.into_iter().map(|i| dataset.items[i].clone()).collect(), split: dataset.split })
}

/// Appearance of the synthetic nuclei corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Semi-axis range in pixels, as a fraction of the image side.
    pub min_axis_frac: f32,
    pub max_axis_frac: f32,
    /// Minimum gap between blob ellipses, in pixels.
    pub min_gap: f32,
    /// Pixel noise standard deviation.
    pub noise: f32,
    /// Half-width of the per-image illumination and stain-intensity jitter.
    pub stain_jitter: f32,
    /// Upper bound on small unlabeled dark debris specks per image.
    pub max_debris: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { min_blobs: 3, max_blobs: 12, min_axis_frac: 0.05, max_axis_frac: 0.11, min_gap: 1.5, noise: 0.05, stain_jitter: 0.0, max_debris: 0 }
    }
}

struct Blob {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    angle: f32,
}

impl Blob {
    /// Normalised elliptical radius of a point (1.0 on the rim).
    fn radius(&self, y: f32, x: f32) -> f32 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }
}

fn smooth_field<R: Rng + ?Sized>(size: usize, cells: usize, rng: &mut R) -> Vec<f32> {
    let grid: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f32>()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let gy = y as f32 / size as f32 * cells as f32;
            let gx = x as f32 / size as f32 * cells as f32;
            let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
            let (fy, fx) = (gy - iy as f32, gx - ix as f32);
            let at = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
            out[y * size + x] = (1.0 - fy) * ((1.0 - fx) * at(iy, ix) + fx * at(iy, ix + 1))
                + fy * ((1.0 - fx) * at(iy + 1, ix) + fx * at(iy + 1, ix + 1));
        }
    }
    out
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    let v: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
    v as f32
}

fn synthetic_sample<R: Rng + ?Sized>(idx: usize, size: usize, cfg: &SyntheticConfig, rng: &mut R) -> Result<LabeledSample> {
    let target = rng.random_range(cfg.min_blobs..=cfg.max_blobs);
    let (amin, amax) = (cfg.min_axis_frac * size as f32, cfg.max_axis_frac * size as f32);
    let mut blobs: Vec<Blob> = Vec::new();
    let mut attempts = 0;
    while blobs.len() < target && attempts < 2000 {
        attempts += 1;
        let ry = rng.random_range(amin..amax);
        let rx = rng.random_range(amin..amax);
        let margin = ry.max(rx) * 0.5;
        let cand = Blob {
            cy: rng.random_range(margin..size as f32 - margin),
            cx: rng.random_range(margin..size as f32 - margin),
            ry,
            rx,
            angle: rng.random_range(0.0..std::f32::consts::PI),
        };
        let clear = blobs.iter().all(|b| {
            let d = ((b.cy - cand.cy).powi(2) + (b.cx - cand.cx).powi(2)).sqrt();
            d > b.ry.max(b.rx) + cand.ry.max(cand.rx) + cfg.min_gap
        });
        if clear {
            blobs.push(cand);
        }
    }
    if blobs.len() < cfg.min_blobs {
        return Err(CmdError::config(format!("could not place {} blobs on a {size}px image", cfg.min_blobs)));
    }

    // Eosin-like background with smooth stroma texture; haematoxylin-like
    // nuclei with a darker rim and chromatin speckle.
    let stroma = smooth_field(size, 6, rng);
    let fibres = smooth_field(size, 16, rng);
    let tint: [f32; 3] = [rng.random_range(0.85..0.95), rng.random_range(0.6..0.75), rng.random_range(0.75..0.88)];
    let stain: [f32; 3] = [rng.random_range(0.35..0.5), rng.random_range(0.2..0.32), rng.random_range(0.5..0.65)];
    let light = 1.0 + cfg.stain_jitter * rng.random_range(-1.0f32..1.0);
    let stain = stain.map(|c| (c * light * (1.0 + cfg.stain_jitter * rng.random_range(-1.0f32..1.0))).min(1.0));
    let tint = tint.map(|c| (c * light).min(1.0));
    let n_debris = if cfg.max_debris > 0 { rng.random_range(0..=cfg.max_debris) } else { 0 };
    let debris: Vec<(f32, f32, f32)> = (0..n_debris)
        .map(|_| (rng.random_range(0.0..size as f32), rng.random_range(0.0..size as f32), rng.random_range(0.8f32..1.6)))
        .collect();
    let mut pixels = vec![0.0f32; size * size * 3];
    let mut labels = vec![0u32; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let tex = 0.75 + 0.2 * stroma[p] + 0.1 * (fibres[p] - 0.5);
            let mut rgb = [tint[0] * tex, tint[1] * tex, tint[2] * tex];
            let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
            if debris.iter().any(|&(dy, dx, r)| (py - dy).powi(2) + (px - dx).powi(2) <= r * r) {
                rgb = stain.map(|c| c * 0.9);
            }
            if let Some(r) = blobs.iter().map(|b| b.radius(py, px)).find(|&r| r <= 1.0) {
                labels[p] = 1;
                let shade = 0.85 + 0.3 * r * r + 0.15 * gaussian(rng);
                for ch in 0..3 {
                    rgb[ch] = stain[ch] * shade;
                }
            }
            for (ch, v) in rgb.iter().enumerate() {
                let noisy = v + cfg.noise * gaussian(rng);
                // quantise so PNG round trips are exact
                pixels[p * 3 + ch] = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    let image = ImagePatch::new(Tensor::from_vec(&[size, size, 3], pixels)?, format!("synth_{idx:05}"))?;
    LabeledSample::new(image, LabelMap::new(size, size, labels)?)
}

/// `n` labeled images of elliptical nuclei on textured stroma, fully
/// determined by `seed`.
pub fn make_synthetic_corpus(n: usize, size: usize, seed: u64) -> Result<PatchDataset> {
    make_synthetic_corpus_with(n, size, seed, &SyntheticConfig::default())
}

pub fn make_synthetic_corpus_with(n: usize, size: usize, seed: u64, cfg: &SyntheticConfig) -> Result<PatchDataset> {
    if n == 0 {
        return Err(CmdError::domain("synthetic corpus needs n >= 1"));
    }
    if cfg.min_blobs == 0 || cfg.min_blobs > cfg.max_blobs {
        return Err(CmdError::config("blob count range is empty"));
    }
    let items = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
            synthetic_sample(i, size, cfg, &mut rng).map(DatasetItem::Labeled)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchDataset { items, split: Split::Train })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_of_full_extent_is_identity() {
        let img = make_synthetic_corpus(1, 32, 3).unwrap().items[0].image().clone();
        // both branches are identities when the image already has the target size
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(mixed_resize(&img, 32, &mut rng).unwrap(), img);
        }
    }

    #[test]
    fn constant_input_stays_constant() {
        let img = ImagePatch::filled(512, 512, 3, 0.4, "c");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..6 {
            let out = mixed_resize(&img, 256, &mut rng).unwrap();
            assert_eq!(out.pixels.shape(), &[256, 256, 3]);
            assert!(out.pixels.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        }
    }

    #[test]
    fn undersized_input_is_rejected() {
        let img = ImagePatch::filled(16, 40, 3, 0.0, "s");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(mixed_resize(&img, 32, &mut rng), Err(CmdError::Size { .. })));
    }

    #[test]
    fn fewshot_contract() {
        let ds = make_synthetic_corpus(32, 32, 0).unwrap();
        let a = sample_fewshot(&ds, 1, 7).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, sample_fewshot(&ds, 1, 7).unwrap());
        assert_eq!(sample_fewshot(&ds, 5, 8).unwrap().len(), 5);
        let small = ds.slice(0..10, Split::Train);
        assert_eq!(sample_fewshot(&small, 10, 3).unwrap(), small);
        assert!(sample_fewshot(&small, 11, 3).is_err());
        assert!(sample_fewshot(&small, 0, 3).is_err());
    }

    #[test]
    fn synthetic_masks_are_binary_and_aligned() {
        let ds = make_synthetic_corpus(20, 64, 11).unwrap();
        for s in ds.labeled().unwrap() {
            assert_eq!((s.mask.height, s.mask.width), (s.image.height(), s.image.width()));
            assert!(s.mask.labels.iter().all(|&l| l <= 1));
            assert!(s.image.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
