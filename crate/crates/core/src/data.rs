//! Grayscale image containers, IDX codec, resizing, split carving, patch
//! tiling and the synthetic fixtures.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::{Real, Tensor};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Single-channel image with pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::InvalidShape(format!("{height}x{width} image with {} pixels", pixels.len())));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Contract("pixel outside [0, 1]".into()));
        }
        Ok(GrayImage { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        GrayImage { height, width, pixels: vec![value; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Pixels quantized to bytes with `round(255 * v)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        GrayImage::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> GrayImage {
        let mut pixels = Vec::with_capacity(height * width);
        for r in top..top + height {
            pixels.extend_from_slice(&self.pixels[r * self.width + left..r * self.width + left + width]);
        }
        GrayImage { height, width, pixels }
    }
}

pub fn quantize(v: f32) -> u8 {
    libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Stacks square images into a `[N, 1, R, R]` tensor.
pub fn batch_tensor<T: Real>(images: &[&GrayImage]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidShape("empty image batch".into()));
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::InvalidShape("images in a batch must share a size".into()));
        }
        data.extend(img.pixels.iter().map(|&p| T::of(p as f64)));
    }
    Tensor::from_vec(&[images.len(), 1, h, w], data)
}

pub fn tensor_to_images<T: Real>(t: &Tensor<T>) -> Vec<GrayImage> {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    t.data()
        .chunks_exact(h * w)
        .map(|c| GrayImage { height: h, width: w, pixels: c.iter().map(|v| v.as_f64() as f32).collect() })
        .collect()
}

/// Images with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Vec<GrayImage>,
    pub labels: Vec<u8>,
    pub provenance: String,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Resizes every image to `side x side` unless it already has that size.
    pub fn resized(&self, side: usize) -> LabeledImageSet {
        LabeledImageSet {
            images: self
                .images
                .iter()
                .map(|i| if i.height == side && i.width == side { i.clone() } else { resize_bilinear(i, side) })
                .collect(),
            labels: self.labels.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet {
        LabeledImageSet {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Binary labels for a class-vs-rest protocol: 1 for every class other
    /// than `inlier_class`.
    pub fn anomaly_labels(&self, inlier_class: u8) -> Vec<u8> {
        self.labels.iter().map(|&l| u8::from(l != inlier_class)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdxError {
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("IDX image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("IDX dimensions are invalid: {0}")]
    BadDimensions(String),
}

fn read_u32(bytes: &[u8], at: usize) -> core::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated { needed: at + 4, available: bytes.len() })
}

/// Parses an IDX3 ubyte image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> core::result::Result<(usize, usize, usize, &[u8]), IdxError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(IdxError::BadMagic { expected: IDX_IMAGE_MAGIC, found: magic });
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(IdxError::BadDimensions(format!("{rows}x{cols}")));
    }
    let needed = 16 + n * rows * cols;
    if bytes.len() < needed {
        return Err(IdxError::Truncated { needed, available: bytes.len() });
    }
    Ok((n, rows, cols, &bytes[16..needed]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> core::result::Result<&[u8], IdxError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(IdxError::BadMagic { expected: IDX_LABEL_MAGIC, found: magic });
    }
    let n = read_u32(bytes, 4)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(IdxError::Truncated { needed, available: bytes.len() });
    }
    Ok(&bytes[8..needed])
}

/// Decodes an IDX image/label pair; pixel bytes map to `[0, 1]` by `/255`.
pub fn load_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledImageSet> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch { images: n, labels: labels.len() }.into());
    }
    let images = pixels.chunks_exact(rows * cols).map(|c| GrayImage::from_bytes(rows, cols, c)).collect::<Result<_>>()?;
    Ok(LabeledImageSet { images, labels: labels.to_vec(), provenance: "idx".into() })
}

/// Encodes equally sized images as an IDX3 ubyte file.
pub fn encode_idx_images(images: &[GrayImage]) -> Result<Vec<u8>> {
    let (rows, cols) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if img.height != rows || img.width != cols {
            return Err(Error::InvalidShape("IDX images must share one size".into()));
        }
        out.extend(img.to_bytes());
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Bilinear resize to `target x target` with corner-aligned sampling: the
/// corner pixels of source and destination coincide.
pub fn resize_bilinear(image: &GrayImage, target: usize) -> GrayImage {
    let coords = |src: usize| -> Vec<(usize, usize, f32)> {
        (0..target)
            .map(|d| {
                let pos = if target > 1 { d as f64 * (src - 1) as f64 / (target - 1) as f64 } else { 0.0 };
                let lo = (libm::floor(pos) as usize).min(src - 1);
                let hi = (lo + 1).min(src - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let rows = coords(image.height);
    let cols = coords(image.width);
    let mut pixels = Vec::with_capacity(target * target);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = lerp(image.get(r0, c0), image.get(r0, c1), fc);
            let bottom = lerp(image.get(r1, c0), image.get(r1, c1), fc);
            pixels.push(lerp(top, bottom, fr).clamp(0.0, 1.0));
        }
    }
    GrayImage { height: target, width: target, pixels }
}

/// Non-overlapping row-major `patch x patch` tiles; edge remainders are
/// dropped.
pub fn extract_patches(frame: &GrayImage, patch: usize) -> Result<Vec<GrayImage>> {
    if patch == 0 || frame.height < patch || frame.width < patch {
        return Err(Error::Protocol(format!(
            "{}x{} frame is smaller than the {patch}x{patch} patch",
            frame.height, frame.width
        )));
    }
    let (rows, cols) = (frame.height / patch, frame.width / patch);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(frame.crop(r * patch, c * patch, patch, patch));
        }
    }
    Ok(out)
}

/// Index lists of one class-vs-rest experiment on a training corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub inlier_class: u8,
    pub seed: u64,
    /// Inliers used for training.
    pub train: Vec<usize>,
    /// Held-out inliers followed by held-out outliers.
    pub validation: Vec<usize>,
    /// Anomaly labels aligned with `validation`.
    pub validation_labels: Vec<u8>,
}

pub const VALIDATION_PER_SIDE: usize = 150;

pub fn make_split(set: &LabeledImageSet, inlier_class: u8, seed: u64) -> Result<SplitPlan> {
    make_split_sized(set, inlier_class, seed, VALIDATION_PER_SIDE)
}

/// Carves `per_side` inliers and `per_side` outliers (drawn uniformly from
/// the pool of every other class) out of the training corpus; the remaining
/// inliers form the training pool.
pub fn make_split_sized(set: &LabeledImageSet, inlier_class: u8, seed: u64, per_side: usize) -> Result<SplitPlan> {
    let mut inliers: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == inlier_class).collect();
    let mut outliers: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] != inlier_class).collect();
    if inliers.is_empty() {
        return Err(Error::Protocol(format!("class {inlier_class} is absent from the training corpus")));
    }
    if inliers.len() <= per_side {
        return Err(Error::Protocol(format!(
            "need more than {per_side} inliers of class {inlier_class}, found {}",
            inliers.len()
        )));
    }
    if outliers.len() < per_side {
        return Err(Error::Protocol(format!("need {per_side} outliers for validation, found {}", outliers.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inliers.shuffle(&mut rng);
    outliers.shuffle(&mut rng);
    let mut validation: Vec<usize> = inliers[..per_side].to_vec();
    validation.extend_from_slice(&outliers[..per_side]);
    let mut validation_labels = vec![0u8; per_side];
    validation_labels.extend(core::iter::repeat(1u8).take(per_side));
    let mut train = inliers[per_side..].to_vec();
    train.sort_unstable();
    Ok(SplitPlan { inlier_class, seed, train, validation, validation_labels })
}

/// Parameters of the synthetic fixtures. Frozen so that reference runs stay
/// reproducible.
pub mod synth {
    pub const SIDE: usize = 32;
    pub const NOISE: f32 = 0.05;
    pub const BLOB_SIGMA: (f32, f32) = (2.0, 3.0);
    pub const BLOB_AMPLITUDE: (f32, f32) = (0.8, 1.0);
    /// Inlier blobs sit in the top-left quadrant, outlier blobs in the
    /// bottom-right one.
    pub const INLIER_CENTER: (f32, f32) = (8.0, 8.0);
    pub const OUTLIER_CENTER: (f32, f32) = (24.0, 24.0);
    pub const CENTER_JITTER: f32 = 2.0;
    pub const RECT_VALUE: (f32, f32) = (0.7, 0.9);

    pub const FRAME_HEIGHT: usize = 240;
    pub const FRAME_WIDTH: usize = 360;
    pub const PATCH: usize = 30;
    pub const BACKGROUND: f32 = 0.3;

    pub const INLIER: u8 = 0;
    pub const OUTLIER_BLOB: u8 = 1;
    pub const OUTLIER_RECT: u8 = 2;
}

fn sq(x: f32) -> f32 {
    x * x
}

fn uniform(rng: &mut ChaCha8Rng, range: (f32, f32)) -> f32 {
    range.0 + (range.1 - range.0) * rng.random::<f32>()
}

fn add_noise(rng: &mut ChaCha8Rng, pixels: &mut [f32]) {
    for p in pixels {
        *p = (*p + synth::NOISE * (2.0 * rng.random::<f32>() - 1.0)).clamp(0.0, 1.0);
    }
}

fn blob(rng: &mut ChaCha8Rng, side: usize, center: (f32, f32), background: f32) -> Vec<f32> {
    let cy = center.0 + synth::CENTER_JITTER * (2.0 * rng.random::<f32>() - 1.0);
    let cx = center.1 + synth::CENTER_JITTER * (2.0 * rng.random::<f32>() - 1.0);
    let sigma = uniform(rng, synth::BLOB_SIGMA);
    let amp = uniform(rng, synth::BLOB_AMPLITUDE);
    let mut px = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let d2 = sq(r as f32 - cy) + sq(c as f32 - cx);
            px.push((background + amp * libm::expf(-d2 / (2.0 * sigma * sigma))).min(1.0));
        }
    }
    px
}

fn rectangle(rng: &mut ChaCha8Rng, side: usize, background: f32) -> Vec<f32> {
    let h = rng.random_range(side / 4..side / 2);
    let w = rng.random_range(side / 4..side / 2);
    let top = rng.random_range(0..side - h);
    let left = rng.random_range(0..side - w);
    let value = uniform(rng, synth::RECT_VALUE);
    let mut px = vec![background; side * side];
    for r in top..top + h {
        for c in left..left + w {
            px[r * side + c] = value;
        }
    }
    px
}

/// Blob images: class 0 has a Gaussian blob in the top-left quadrant,
/// class 1 in the bottom-right quadrant, class 2 is a filled rectangle.
/// Samples are ordered by class.
pub fn gen_blobs(seed: u64, inliers: usize, outliers_per_class: usize) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = synth::SIDE;
    let mut images = Vec::with_capacity(inliers + 2 * outliers_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    let plan = [(synth::INLIER, inliers), (synth::OUTLIER_BLOB, outliers_per_class), (synth::OUTLIER_RECT, outliers_per_class)];
    for (class, count) in plan {
        for _ in 0..count {
            let mut px = match class {
                synth::INLIER => blob(&mut rng, side, synth::INLIER_CENTER, 0.0),
                synth::OUTLIER_BLOB => blob(&mut rng, side, synth::OUTLIER_CENTER, 0.0),
                _ => rectangle(&mut rng, side, 0.0),
            };
            add_noise(&mut rng, &mut px);
            images.push(GrayImage { height: side, width: side, pixels: px });
            labels.push(class);
        }
    }
    LabeledImageSet { images, labels, provenance: format!("synthetic-blobs(seed={seed})") }
}

/// Frame of a labeled video sequence (label 1 = anomalous frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: GrayImage,
    pub label: u8,
    /// Row-major tile index of the anomalous tile, when known.
    pub odd_tile: Option<usize>,
}

/// Normal texture: a dim vertical figure on the background.
fn normal_patch(rng: &mut ChaCha8Rng) -> Vec<f32> {
    let p = synth::PATCH;
    let cx = rng.random_range(10..20) as f32;
    let cy = rng.random_range(12..18) as f32;
    let mut px = vec![synth::BACKGROUND; p * p];
    for r in 0..p {
        for c in 0..p {
            let d = sq((r as f32 - cy) / 8.0) + sq((c as f32 - cx) / 2.5);
            px[r * p + c] += 0.35 * libm::expf(-d);
        }
    }
    px
}

/// Anomalous texture: a bright wide block.
fn anomalous_patch(rng: &mut ChaCha8Rng) -> Vec<f32> {
    let p = synth::PATCH;
    let top = rng.random_range(6..12);
    let mut px = vec![synth::BACKGROUND; p * p];
    for r in top..top + 10 {
        for c in 2..p - 2 {
            px[r * p + c] = 0.95;
        }
    }
    px
}

/// 240x360 frames tiled with normal 30x30 textures. Every
/// `abnormal_every`-th frame replaces exactly one random tile with the
/// anomalous texture; 0 means no anomalous frames.
pub fn gen_video(seed: u64, frames: usize, abnormal_every: usize) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, p) = (synth::FRAME_HEIGHT, synth::FRAME_WIDTH, synth::PATCH);
    let tiles = (h / p) * (w / p);
    (0..frames)
        .map(|f| {
            let label = u8::from(abnormal_every > 0 && (f + 1) % abnormal_every == 0);
            let odd_tile = if label == 1 { Some(rng.random_range(0..tiles)) } else { None };
            let mut pixels = vec![0.0f32; h * w];
            for t in 0..tiles {
                let mut tile = if Some(t) == odd_tile { anomalous_patch(&mut rng) } else { normal_patch(&mut rng) };
                add_noise(&mut rng, &mut tile);
                let (tr, tc) = (t / (w / p), t % (w / p));
                for r in 0..p {
                    let dst = (tr * p + r) * w + tc * p;
                    pixels[dst..dst + p].copy_from_slice(&tile[r * p..(r + 1) * p]);
                }
            }
            Frame { image: GrayImage { height: h, width: w, pixels }, label, odd_tile }
        })
        .collect()
}

/// Normal-texture patches from normal frames, for training on the frame
/// protocol.
pub fn normal_patches(frames: &[Frame], patch: usize) -> Result<Vec<GrayImage>> {
    let mut out = Vec::new();
    for f in frames.iter().filter(|f| f.label == 0) {
        out.extend(extract_patches(&f.image, patch)?);
    }
    Ok(out)
}
