//! Evaluation protocols: one class against the rest for labeled image sets,
//! and patch-tiled frames with frame-level labels for video.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{extract_patches, resize_bilinear, Frame, GrayImage, LabeledImageSet};
use crate::error::{Error, Result};
use crate::metrics::{auroc, eer};
use crate::models::AlpsModel;
use crate::scoring::{ScoreTriple, Variant};
use crate::training::score_images;
use crate::Real;

/// Raw scores of one evaluated unit (image or frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRow {
    pub id: usize,
    /// 1 = anomaly.
    pub label: u8,
    /// Per [`Variant`], in `Variant::ALL` order.
    pub scores: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auroc: [f64; 3],
    pub eer: [f64; 3],
    /// Variant picked on the validation split.
    pub chosen: Variant,
    pub inliers: usize,
    pub outliers: usize,
    pub rows: Vec<ScoreRow>,
    /// Set by the frame protocol.
    pub patches_per_frame: Option<usize>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ScoreRow>, chosen: Variant) -> Result<Self> {
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        let mut a = [0.0; 3];
        let mut e = [0.0; 3];
        for v in Variant::ALL {
            let s: Vec<f64> = rows.iter().map(|r| r.scores[v.index()]).collect();
            a[v.index()] = auroc(&s, &labels)?;
            e[v.index()] = eer(&s, &labels)?;
        }
        let outliers = labels.iter().filter(|&&l| l != 0).count();
        Ok(EvalReport { auroc: a, eer: e, chosen, inliers: rows.len() - outliers, outliers, rows, patches_per_frame: None })
    }

    pub fn samples(&self) -> usize {
        self.rows.len()
    }

    pub fn chosen_auroc(&self) -> f64 {
        self.auroc[self.chosen.index()]
    }

    pub fn chosen_eer(&self) -> f64 {
        self.eer[self.chosen.index()]
    }
}

fn at_resolution(img: &GrayImage, side: usize) -> GrayImage {
    if img.height == side && img.width == side {
        img.clone()
    } else {
        resize_bilinear(img, side)
    }
}

/// Scores every test image; anomalies are all classes other than
/// `inlier_class`.
pub fn run_class_vs_rest<T: Real>(
    model: &AlpsModel<T>,
    test: &LabeledImageSet,
    inlier_class: u8,
    chosen: Variant,
) -> Result<EvalReport> {
    if !test.labels.contains(&inlier_class) {
        return Err(Error::Protocol(format!("class {inlier_class} is absent from the test split")));
    }
    let side = model.config.resolution;
    let images: Vec<GrayImage> = test.images.iter().map(|i| at_resolution(i, side)).collect();
    let triples = score_images(model, &images)?;
    let rows = triples
        .iter()
        .zip(&test.labels)
        .enumerate()
        .map(|(id, (t, &l))| ScoreRow { id, label: u8::from(l != inlier_class), scores: t.as_array() })
        .collect();
    EvalReport::from_rows(rows, chosen)
}

/// Unweighted mean of per-class AUROCs.
pub fn mean_auroc(per_class: &[f64]) -> f64 {
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Max,
    Mean,
}

impl Aggregation {
    pub fn apply(self, values: impl Iterator<Item = f64>) -> f64 {
        match self {
            Aggregation::Max => values.fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Mean => {
                let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
                sum / n as f64
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Max => "max",
            Aggregation::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameScore {
    pub frame: usize,
    pub label: u8,
    pub patch_scores: Vec<ScoreTriple>,
    /// Aggregated per [`Variant`].
    pub frame_score: [f64; 3],
}

/// Tiles each frame into `patch x patch` squares, scores every patch at the
/// model resolution and aggregates per frame.
pub fn score_frames<T: Real>(
    model: &AlpsModel<T>,
    frames: &[Frame],
    patch: usize,
    aggregation: Aggregation,
) -> Result<Vec<FrameScore>> {
    let side = model.config.resolution;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let patches: Vec<GrayImage> = extract_patches(&f.image, patch)?.iter().map(|p| at_resolution(p, side)).collect();
            let patch_scores = score_images(model, &patches)?;
            let mut frame_score = [0.0; 3];
            for v in Variant::ALL {
                frame_score[v.index()] = aggregation.apply(patch_scores.iter().map(|t| t.get(v)));
            }
            Ok(FrameScore { frame: i, label: f.label, patch_scores, frame_score })
        })
        .collect()
}

pub fn run_frame_protocol<T: Real>(
    model: &AlpsModel<T>,
    frames: &[Frame],
    patch: usize,
    aggregation: Aggregation,
    chosen: Variant,
) -> Result<EvalReport> {
    let scored = score_frames(model, frames, patch, aggregation)?;
    let per_frame = scored.first().map(|f| f.patch_scores.len());
    let rows = scored.iter().map(|f| ScoreRow { id: f.frame, label: f.label, scores: f.frame_score }).collect();
    let mut report = EvalReport::from_rows(rows, chosen)?;
    report.patches_per_frame = per_frame;
    Ok(report)
}
