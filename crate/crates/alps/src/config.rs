//! Run configuration files: one `key = value` pair per line, `#` starts a
//! comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use alps_core::models::ModelConfig;
use alps_core::nn::OptimizerKind;
use alps_core::scoring::Variant;
use alps_core::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("key `{key}`: cannot use `{value}`: {reason}")]
    Invalid { key: &'static str, value: String, reason: String },
    #[error("{0}")]
    Rejected(String),
}

/// Source of training images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    /// Generated blob images, see `gen-synth --kind blobs`.
    SynthBlobs,
    /// `train-images`/`train-labels` IDX files in `data_dir`.
    Idx,
    /// PGM patch directories `train/`, `val/normal/`, `val/anomalous/` in
    /// `data_dir`.
    Patches,
}

impl Dataset {
    fn name(self) -> &'static str {
        match self {
            Dataset::SynthBlobs => "synth-blobs",
            Dataset::Idx => "idx",
            Dataset::Patches => "patches",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub dataset: Dataset,
    pub data_dir: Option<PathBuf>,
    pub inlier_class: u8,
    /// Cap on the number of training inliers.
    pub train_limit: Option<usize>,
    pub validation_per_side: usize,
    pub synth_inliers: usize,
    pub synth_outliers_per_class: usize,
    pub out_dir: Option<PathBuf>,
}

/// Every accepted key with its default, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("dataset", "(required) synth-blobs | idx | patches"),
    ("data_dir", "(required for idx and patches)"),
    ("inlier_class", "0 (required for idx)"),
    ("train_limit", "none"),
    ("validation_per_side", "150"),
    ("synth_inliers", "2000"),
    ("synth_outliers_per_class", "150"),
    ("out_dir", "none"),
    ("epochs", "30"),
    ("batch_size", "32"),
    ("lr_ae", "0.001"),
    ("lr_distorter", "0.001"),
    ("distorter_every", "3"),
    ("w_ae", "1"),
    ("w_dist", "0.5"),
    ("seed", "42"),
    ("optimizer", "adam | sgd"),
    ("select_variant", "mean | plain | perturbed"),
    ("delta_max", "1"),
    ("latent_dim", "64"),
    ("resolution", "32"),
    ("encoder_channels", "8,16,32"),
    ("decoder_seed_channels", "32"),
    ("decoder_channels", "16,16,8,8,8"),
];

fn key_ref(key: &str) -> Option<&'static str> {
    KEYS.iter().map(|(k, _)| *k).find(|k| *k == key)
}

struct Entries(BTreeMap<&'static str, String>);

impl Entries {
    fn take<T: std::str::FromStr>(&mut self, key: &'static str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e: T::Err| ConfigError::Invalid { key, value: v.clone(), reason: e.to_string() }),
        }
    }

    fn list<const N: usize>(&mut self, key: &'static str) -> Result<Option<[usize; N]>, ConfigError> {
        let Some(v) = self.0.remove(key) else { return Ok(None) };
        let invalid = |reason: String| ConfigError::Invalid { key, value: v.clone(), reason };
        let parts = v
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| invalid(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        parts.try_into().map(Some).map_err(|p: Vec<usize>| invalid(format!("expected {N} values, got {}", p.len())))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            }
            let key = key_ref(k).ok_or_else(|| ConfigError::UnknownKey { line: i + 1, key: k.to_string() })?;
            if entries.insert(key, v.to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: i + 1, key: k.to_string() });
            }
        }
        Self::from_entries(Entries(entries))
    }

    fn from_entries(mut e: Entries) -> Result<RunConfig, ConfigError> {
        let dataset = match e.0.remove("dataset").as_deref() {
            None => return Err(ConfigError::Missing("dataset")),
            Some("synth-blobs") => Dataset::SynthBlobs,
            Some("idx") => Dataset::Idx,
            Some("patches") => Dataset::Patches,
            Some(other) => {
                return Err(ConfigError::Invalid {
                    key: "dataset",
                    value: other.into(),
                    reason: "expected synth-blobs, idx or patches".into(),
                })
            }
        };
        let data_dir: Option<PathBuf> = e.take::<String>("data_dir")?.map(PathBuf::from);
        if data_dir.is_none() && dataset != Dataset::SynthBlobs {
            return Err(ConfigError::Missing("data_dir"));
        }
        let inlier_class = e.take("inlier_class")?;
        if inlier_class.is_none() && dataset == Dataset::Idx {
            return Err(ConfigError::Missing("inlier_class"));
        }

        let d = TrainingConfig::default();
        let m = ModelConfig::default();
        let optimizer = match e.0.remove("optimizer").as_deref() {
            None | Some("adam") => OptimizerKind::ADAM,
            Some("sgd") => OptimizerKind::Sgd,
            Some(other) => {
                return Err(ConfigError::Invalid { key: "optimizer", value: other.into(), reason: "expected adam or sgd".into() })
            }
        };
        let selection_variant = match e.0.remove("select_variant") {
            None => d.selection_variant,
            Some(v) => Variant::parse(&v).ok_or_else(|| ConfigError::Invalid {
                key: "select_variant",
                value: v.clone(),
                reason: "expected plain, perturbed or mean".into(),
            })?,
        };
        let model = ModelConfig {
            resolution: e.take("resolution")?.unwrap_or(m.resolution),
            latent_dim: e.take("latent_dim")?.unwrap_or(m.latent_dim),
            delta_max: e.take("delta_max")?.unwrap_or(m.delta_max),
            encoder_channels: e.list("encoder_channels")?.unwrap_or(m.encoder_channels),
            decoder_seed_channels: e.take("decoder_seed_channels")?.unwrap_or(m.decoder_seed_channels),
            decoder_channels: e.list("decoder_channels")?.unwrap_or(m.decoder_channels),
        };
        let training = TrainingConfig {
            model,
            epochs: e.take("epochs")?.unwrap_or(d.epochs),
            batch_size: e.take("batch_size")?.unwrap_or(d.batch_size),
            lr_ae: e.take("lr_ae")?.unwrap_or(d.lr_ae),
            lr_distorter: e.take("lr_distorter")?.unwrap_or(d.lr_distorter),
            distorter_every: e.take("distorter_every")?.unwrap_or(d.distorter_every),
            w_ae: e.take("w_ae")?.unwrap_or(d.w_ae),
            w_dist: e.take("w_dist")?.unwrap_or(d.w_dist),
            seed: e.take("seed")?.unwrap_or(d.seed),
            optimizer,
            selection_variant,
        };
        training.validate().map_err(|err| ConfigError::Rejected(err.to_string()))?;
        let config = RunConfig {
            training,
            dataset,
            data_dir,
            inlier_class: inlier_class.unwrap_or(0),
            train_limit: e.take("train_limit")?,
            validation_per_side: e.take("validation_per_side")?.unwrap_or(150),
            synth_inliers: e.take("synth_inliers")?.unwrap_or(2000),
            synth_outliers_per_class: e.take("synth_outliers_per_class")?.unwrap_or(150),
            out_dir: e.take::<String>("out_dir")?.map(PathBuf::from),
        };
        debug_assert!(e.0.is_empty(), "unconsumed keys {:?}", e.0.keys());
        if config.validation_per_side == 0 {
            return Err(ConfigError::Rejected("validation_per_side must be positive".into()));
        }
        Ok(config)
    }

    /// Fully resolved configuration in the file format; parses back to an
    /// equal value.
    pub fn to_text(&self) -> String {
        let t = &self.training;
        let m = &t.model;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        put("dataset", self.dataset.name().into());
        if let Some(d) = &self.data_dir {
            put("data_dir", d.display().to_string());
        }
        put("inlier_class", self.inlier_class.to_string());
        if let Some(l) = self.train_limit {
            put("train_limit", l.to_string());
        }
        put("validation_per_side", self.validation_per_side.to_string());
        put("synth_inliers", self.synth_inliers.to_string());
        put("synth_outliers_per_class", self.synth_outliers_per_class.to_string());
        if let Some(d) = &self.out_dir {
            put("out_dir", d.display().to_string());
        }
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr_ae", t.lr_ae.to_string());
        put("lr_distorter", t.lr_distorter.to_string());
        put("distorter_every", t.distorter_every.to_string());
        put("w_ae", t.w_ae.to_string());
        put("w_dist", t.w_dist.to_string());
        put("seed", t.seed.to_string());
        let opt = match t.optimizer {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        };
        put("optimizer", opt.into());
        put("select_variant", t.selection_variant.name().into());
        put("delta_max", m.delta_max.to_string());
        put("latent_dim", m.latent_dim.to_string());
        put("resolution", m.resolution.to_string());
        put("encoder_channels", join(&m.encoder_channels));
        put("decoder_seed_channels", m.decoder_seed_channels.to_string());
        put("decoder_channels", join(&m.decoder_channels));
        s
    }
}
