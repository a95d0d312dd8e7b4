//! Files on disk: PGM images, IDX datasets, checkpoints, CSV reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use alps_core::data::{load_idx, quantize, GrayImage, LabeledImageSet};
use alps_core::models::AlpsModel;
use alps_core::protocol::EvalReport;
use alps_core::scoring::{minmax_scale, Variant};
use alps_core::training::EpochRecord;
use alps_core::{checkpoint, Error};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{CliError, Result};

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut reader = ImageReader::open(path).map_err(CliError::io(path))?;
    reader.set_format(ImageFormat::Pnm);
    let img = reader.decode().map_err(|e| CliError::data(path, e))?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    Ok(GrayImage::from_bytes(h as usize, w as usize, luma.as_raw())?)
}

/// Binary PGM with maxval 255.
pub fn encode_pgm(height: usize, width: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(bytes, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| CliError::Data(format!("cannot encode PGM: {e}")))?;
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    write_file(path, &encode_pgm(image.height, image.width, &image.to_bytes())?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(CliError::io(path))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(CliError::io(path))
}

/// `*.pgm` files of a directory in name order.
pub fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_pgm_dir(dir: &Path) -> Result<Vec<GrayImage>> {
    pgm_files(dir)?.iter().map(|p| read_pgm(p)).collect()
}

/// Which half of an IDX corpus to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Accepted `(images, labels)` file names, in lookup order.
    fn names(self) -> [(&'static str, &'static str); 2] {
        match self {
            Split::Train => {
                [("train-images.idx", "train-labels.idx"), ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")]
            }
            Split::Test => [("test-images.idx", "test-labels.idx"), ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")],
        }
    }
}

pub fn idx_paths(dir: &Path, split: Split) -> Result<(PathBuf, PathBuf)> {
    split
        .names()
        .iter()
        .map(|(i, l)| (dir.join(i), dir.join(l)))
        .find(|(i, l)| i.is_file() && l.is_file())
        .ok_or_else(|| {
            let tried: Vec<&str> = split.names().iter().map(|(i, _)| *i).collect();
            CliError::data(dir, format!("no IDX pair found (looked for {})", tried.join(", ")))
        })
}

pub fn read_idx_dir(dir: &Path, split: Split) -> Result<LabeledImageSet> {
    let (images, labels) = idx_paths(dir, split)?;
    let ib = fs::read(&images).map_err(CliError::io(&images))?;
    let lb = fs::read(&labels).map_err(CliError::io(&labels))?;
    let mut set = load_idx(&ib, &lb).map_err(|e| CliError::data(&images, e))?;
    set.provenance = images.display().to_string();
    Ok(set)
}

pub fn save_checkpoint(path: &Path, model: &AlpsModel<f32>) -> Result<()> {
    write_file(path, &checkpoint::encode(model))
}

pub fn load_checkpoint(path: &Path) -> Result<AlpsModel<f32>> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    checkpoint::decode(&bytes).map_err(|e| CliError::data(path, e))
}

fn csv_error(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |e| CliError::data(path, e)
}

/// Epoch log, one row appended per epoch.
pub struct EpochLog {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl EpochLog {
    pub const HEADER: [&'static str; 6] =
        ["epoch", "train_loss", "val_auroc_plain", "val_auroc_perturbed", "val_auroc_mean", "is_best"];

    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).map_err(csv_error(path))?;
        writer.write_record(Self::HEADER).map_err(csv_error(path))?;
        writer.flush().map_err(CliError::io(path))?;
        Ok(EpochLog { path: path.to_path_buf(), writer })
    }

    pub fn append(&mut self, r: &EpochRecord) -> Result<()> {
        let [p, q, m] = r.val_auroc;
        let row = [r.epoch.to_string(), r.train_loss.to_string(), p.to_string(), q.to_string(), m.to_string(), u8::from(r.is_best).to_string()];
        self.writer.write_record(&row).map_err(csv_error(&self.path))?;
        self.writer.flush().map_err(CliError::io(&self.path))
    }
}

/// Per-sample scores with per-split min-max scaled columns.
pub fn write_scores_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let column = |v: Variant| report.rows.iter().map(|r| r.scores[v.index()]).collect::<Vec<_>>();
    let scaled = Variant::ALL.map(|v| minmax_scale(&column(v)));
    let scaled = match scaled {
        [Ok(a), Ok(b), Ok(c)] => [a, b, c],
        _ => return Err(Error::Contract("empty report".into()).into()),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(["sample_id", "label", "plain", "perturbed", "mean", "scaled_plain", "scaled_perturbed", "scaled_mean"])
        .map_err(csv_error(path))?;
    for (i, row) in report.rows.iter().enumerate() {
        let mut rec = vec![row.id.to_string(), row.label.to_string()];
        rec.extend(row.scores.iter().map(|s| s.to_string()));
        rec.extend(scaled.iter().map(|s| s[i].to_string()));
        w.write_record(&rec).map_err(csv_error(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

/// One row per score variant.
pub fn write_metrics_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(["variant", "auroc", "eer", "chosen"]).map_err(csv_error(path))?;
    for v in Variant::ALL {
        let rec = [
            v.name().to_string(),
            report.auroc[v.index()].to_string(),
            report.eer[v.index()].to_string(),
            u8::from(v == report.chosen).to_string(),
        ];
        w.write_record(&rec).map_err(csv_error(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Audit listing of a split: `index,role,label`.
pub fn write_split_csv(path: &Path, rows: &[(usize, &str, u8)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(["index", "role", "label"]).map_err(csv_error(path))?;
    for (i, role, label) in rows {
        w.write_record([i.to_string(), role.to_string(), label.to_string()]).map_err(csv_error(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Frame labels file: `frame,label` with frame file names.
pub fn read_frame_labels(path: &Path) -> Result<Vec<(String, u8)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_error(path))?;
        let (Some(name), Some(label)) = (rec.get(0), rec.get(1)) else {
            return Err(CliError::data(path, "expected `frame,label` rows"));
        };
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(CliError::data(path, format!("label must be 0 or 1, got `{other}`"))),
        };
        out.push((name.trim().to_string(), label));
    }
    Ok(out)
}

pub fn write_frame_labels(path: &Path, rows: &[(String, u8)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(["frame", "label"]).map_err(csv_error(path))?;
    for (name, label) in rows {
        w.write_record([name.as_str(), &label.to_string()]).map_err(csv_error(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Images stacked in rows, each row `left | right`, quantized to bytes.
pub fn side_by_side(pairs: &[(GrayImage, GrayImage)]) -> (usize, usize, Vec<u8>) {
    let (h, w) = (pairs[0].0.height, pairs[0].0.width);
    let mut bytes = Vec::with_capacity(pairs.len() * h * 2 * w);
    for (left, right) in pairs {
        for r in 0..h {
            bytes.extend(left.pixels[r * w..(r + 1) * w].iter().map(|&v| quantize(v)));
            bytes.extend(right.pixels[r * w..(r + 1) * w].iter().map(|&v| quantize(v)));
        }
    }
    (pairs.len() * h, 2 * w, bytes)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(CliError::io(path))?;
    f.write_all(text.as_bytes()).map_err(CliError::io(path))
}
