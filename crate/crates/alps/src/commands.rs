//! Command implementations; each returns a value the CLI prints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use alps_core::data::{
    batch_tensor, encode_idx_images, encode_idx_labels, extract_patches, gen_blobs, gen_video, make_split_sized,
    resize_bilinear, synth, tensor_to_images, GrayImage, LabeledImageSet, Frame,
};
use alps_core::models::AlpsModel;
use alps_core::protocol::{run_class_vs_rest, run_frame_protocol, Aggregation, EvalReport};
use alps_core::scoring::{reconstruct_both, score_sample, select_best_variant, ScoreSet, ScoreTriple, Variant};
use alps_core::training::{score_images, train, TrainingData};

use crate::config::{Dataset, RunConfig};
use crate::error::{CliError, Result};
use crate::formats::{self, EpochLog, Split};

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const CONFIG_FILE: &str = "config.resolved";
pub const VARIANT_FILE: &str = "variant.txt";
pub const SPLIT_FILE: &str = "split.csv";

/// Seed for the held-out part of generated corpora.
pub fn test_seed(seed: u64) -> u64 {
    seed ^ 0x5DEE_CE66_D1CE_5EED
}

fn at_resolution(images: Vec<GrayImage>, side: usize) -> Vec<GrayImage> {
    images
        .into_iter()
        .map(|i| if i.height == side && i.width == side { i } else { resize_bilinear(&i, side) })
        .collect()
}

/// Training images, labeled validation images and an audit listing.
pub struct Prepared {
    pub train: Vec<GrayImage>,
    pub validation: Vec<GrayImage>,
    pub validation_labels: Vec<u8>,
    pub split_rows: Vec<(usize, &'static str, u8)>,
}

fn carve(set: &LabeledImageSet, config: &RunConfig) -> Result<Prepared> {
    let plan = make_split_sized(set, config.inlier_class, config.training.seed, config.validation_per_side)?;
    let mut train_idx = plan.train.clone();
    if let Some(limit) = config.train_limit {
        train_idx.truncate(limit);
    }
    let mut split_rows: Vec<(usize, &str, u8)> = train_idx.iter().map(|&i| (i, "train", 0)).collect();
    split_rows.extend(plan.validation.iter().zip(&plan.validation_labels).map(|(&i, &l)| (i, "validation", l)));
    Ok(Prepared {
        train: set.subset(&train_idx).images,
        validation: set.subset(&plan.validation).images,
        validation_labels: plan.validation_labels,
        split_rows,
    })
}

pub fn prepare_data(config: &RunConfig) -> Result<Prepared> {
    let side = config.training.model.resolution;
    let mut p = match config.dataset {
        Dataset::SynthBlobs => {
            let set = gen_blobs(config.training.seed, config.synth_inliers, config.synth_outliers_per_class);
            carve(&set, config)?
        }
        Dataset::Idx => {
            let dir = config.data_dir.as_deref().expect("validated");
            carve(&formats::read_idx_dir(dir, Split::Train)?, config)?
        }
        Dataset::Patches => {
            let dir = config.data_dir.as_deref().expect("validated");
            let mut train = formats::read_pgm_dir(&dir.join("train"))?;
            if let Some(limit) = config.train_limit {
                train.truncate(limit);
            }
            let normal = formats::read_pgm_dir(&dir.join("val").join("normal"))?;
            let anomalous = formats::read_pgm_dir(&dir.join("val").join("anomalous"))?;
            let mut labels = vec![0u8; normal.len()];
            labels.resize(normal.len() + anomalous.len(), 1);
            let mut rows: Vec<(usize, &str, u8)> = (0..train.len()).map(|i| (i, "train", 0)).collect();
            rows.extend(labels.iter().enumerate().map(|(i, &l)| (i, "validation", l)));
            Prepared { train, validation: normal.into_iter().chain(anomalous).collect(), validation_labels: labels, split_rows: rows }
        }
    };
    if p.train.is_empty() {
        return Err(CliError::Data("no training images".into()));
    }
    p.train = at_resolution(std::mem::take(&mut p.train), side);
    p.validation = at_resolution(std::mem::take(&mut p.validation), side);
    Ok(p)
}

pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_auroc: Option<f64>,
    pub variant: Variant,
    pub out_dir: PathBuf,
}

/// Trains and writes checkpoint, epoch log, resolved config, chosen score
/// variant and split listing into `out`.
pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let data = prepare_data(config)?;
    formats::create_dir(out)?;
    formats::write_text(&out.join(CONFIG_FILE), &config.to_text())?;
    formats::write_split_csv(&out.join(SPLIT_FILE), &data.split_rows)?;
    let mut log = EpochLog::create(&out.join(EPOCHS_FILE))?;
    let mut log_err = None;
    let outcome = train::<f32>(
        &config.training,
        TrainingData { train: &data.train, validation: &data.validation, validation_labels: &data.validation_labels },
        |record, _| {
            if log_err.is_none() {
                log_err = log.append(record).err();
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(e);
    }
    formats::save_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.best)?;
    let validation = ScoreSet {
        triples: score_images(&outcome.best, &data.validation)?,
        labels: Some(data.validation_labels.clone()),
    };
    let variant = select_best_variant(&validation)?;
    formats::write_text(&out.join(VARIANT_FILE), &format!("{}\n", variant.name()))?;
    Ok(TrainSummary {
        epochs_run: outcome.records.len(),
        best_epoch: outcome.best_epoch,
        best_auroc: outcome.best_epoch.map(|e| outcome.records[e].val_auroc[config.training.selection_variant.index()]),
        variant,
        out_dir: out.to_path_buf(),
    })
}

/// Variant recorded next to a checkpoint by `train`, if any.
pub fn recorded_variant(ckpt: &Path) -> Result<Option<Variant>> {
    let path = ckpt.with_file_name(VARIANT_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    Variant::parse(text.trim()).map(Some).ok_or_else(|| CliError::data(&path, "unknown score variant"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    ClassVsRest { inlier_class: u8 },
    Frames { patch: usize, aggregation: Aggregation },
}

pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    let labels = formats::read_frame_labels(&dir.join("labels.csv"))?;
    labels
        .into_iter()
        .map(|(name, label)| Ok(Frame { image: formats::read_pgm(&dir.join(name))?, label, odd_tile: None }))
        .collect()
}

pub fn cmd_eval(model: &AlpsModel<f32>, data: &Path, protocol: Protocol, chosen: Variant) -> Result<EvalReport> {
    match protocol {
        Protocol::ClassVsRest { inlier_class } => {
            let test = formats::read_idx_dir(data, Split::Test)?;
            Ok(run_class_vs_rest(model, &test, inlier_class, chosen)?)
        }
        Protocol::Frames { patch, aggregation } => {
            let frames = load_frames(data)?;
            if frames.is_empty() {
                return Err(CliError::data(data, "no frames listed"));
            }
            Ok(run_frame_protocol(model, &frames, patch, aggregation, chosen)?)
        }
    }
}

pub fn summary_text(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "samples {} (inliers {}, outliers {})", report.samples(), report.inliers, report.outliers);
    if let Some(p) = report.patches_per_frame {
        let _ = writeln!(s, "patches per frame {p}");
    }
    for v in Variant::ALL {
        let mark = if v == report.chosen { "  <- chosen" } else { "" };
        let _ = writeln!(s, "{:<10} auroc {:.4}  eer {:.4}{mark}", v.name(), report.auroc[v.index()], report.eer[v.index()]);
    }
    s
}

fn check_resolution(model: &AlpsModel<f32>, image: &GrayImage, path: &Path) -> Result<()> {
    let r = model.config.resolution;
    if image.height != r || image.width != r {
        return Err(CliError::data(path, format!("image is {}x{}, model expects {r}x{r}", image.height, image.width)));
    }
    Ok(())
}

pub fn cmd_score(model: &AlpsModel<f32>, input: &Path) -> Result<ScoreTriple> {
    let image = formats::read_pgm(input)?;
    check_resolution(model, &image, input)?;
    Ok(score_sample(model, &batch_tensor(&[&image])?)?)
}

pub fn score_lines(t: &ScoreTriple) -> String {
    format!("plain {}\nperturbed {}\nmean {}\n", t.plain, t.perturbed, t.mean)
}

/// Input images next to their reconstructions from perturbed codes.
pub fn cmd_reconstruct(model: &AlpsModel<f32>, input: &Path, out: &Path) -> Result<usize> {
    let paths = if input.is_dir() { formats::pgm_files(input)? } else { vec![input.to_path_buf()] };
    if paths.is_empty() {
        return Err(CliError::data(input, "no PGM images"));
    }
    let mut pairs = Vec::with_capacity(paths.len());
    for p in &paths {
        let image = formats::read_pgm(p)?;
        check_resolution(model, &image, p)?;
        let (_, perturbed) = reconstruct_both(model, &batch_tensor(&[&image])?)?;
        let recon = tensor_to_images(&perturbed).remove(0);
        pairs.push((image, recon));
    }
    let (h, w, bytes) = formats::side_by_side(&pairs);
    formats::write_file(out, &formats::encode_pgm(h, w, &bytes)?)?;
    Ok(pairs.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Blobs { inliers: usize, outliers_per_class: usize, test_inliers: usize, test_outliers_per_class: usize },
    Video { train_frames: usize, val_frames: usize, test_frames: usize, abnormal_every: usize },
}

fn write_idx_pair(dir: &Path, prefix: &str, set: &LabeledImageSet) -> Result<()> {
    formats::write_file(&dir.join(format!("{prefix}-images.idx")), &encode_idx_images(&set.images)?)?;
    formats::write_file(&dir.join(format!("{prefix}-labels.idx")), &encode_idx_labels(&set.labels))
}

fn write_numbered(dir: &Path, stem: &str, images: &[GrayImage]) -> Result<Vec<String>> {
    formats::create_dir(dir)?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let name = format!("{stem}_{i:05}.pgm");
            formats::write_pgm(&dir.join(&name), img)?;
            Ok(name)
        })
        .collect()
}

/// Writes a synthetic corpus into `out`; returns the number of files.
pub fn cmd_gen_synth(kind: SynthKind, seed: u64, out: &Path) -> Result<usize> {
    formats::create_dir(out)?;
    match kind {
        SynthKind::Blobs { inliers, outliers_per_class, test_inliers, test_outliers_per_class } => {
            write_idx_pair(out, "train", &gen_blobs(seed, inliers, outliers_per_class))?;
            write_idx_pair(out, "test", &gen_blobs(test_seed(seed), test_inliers, test_outliers_per_class))?;
            Ok(4)
        }
        SynthKind::Video { train_frames, val_frames, test_frames, abnormal_every } => {
            let p = synth::PATCH;
            let train: Vec<GrayImage> =
                gen_video(seed, train_frames, 0).iter().map(|f| extract_patches(&f.image, p)).collect::<Result<Vec<_>, _>>()?.concat();
            let mut normal = Vec::new();
            let mut anomalous = Vec::new();
            for f in gen_video(seed.wrapping_add(1), val_frames, 1) {
                let tiles = extract_patches(&f.image, p)?;
                let odd = f.odd_tile.expect("every frame is abnormal");
                anomalous.push(tiles[odd].clone());
                normal.push(tiles[(odd + tiles.len() / 2) % tiles.len()].clone());
            }
            let mut files = write_numbered(&out.join("train"), "patch", &train)?.len();
            files += write_numbered(&out.join("val").join("normal"), "patch", &normal)?.len();
            files += write_numbered(&out.join("val").join("anomalous"), "patch", &anomalous)?.len();
            let frames = gen_video(test_seed(seed), test_frames, abnormal_every);
            let images: Vec<GrayImage> = frames.iter().map(|f| f.image.clone()).collect();
            let names = write_numbered(&out.join("frames"), "frame", &images)?;
            let rows: Vec<(String, u8)> = names.into_iter().zip(frames.iter().map(|f| f.label)).collect();
            formats::write_frame_labels(&out.join("frames").join("labels.csv"), &rows)?;
            Ok(files + rows.len() + 1)
        }
    }
}

pub fn cmd_extract_patches(input: &Path, patch: usize, out: &Path) -> Result<usize> {
    let frame = formats::read_pgm(input)?;
    let patches = extract_patches(&frame, patch).map_err(|e| CliError::data(input, e))?;
    Ok(write_numbered(out, "patch", &patches)?.len())
}
