use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use alps_core::data::synth;
use alps_core::protocol::Aggregation;
use alps_core::scoring::Variant;
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{self, Protocol, SynthKind};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "ALPS_SEED";

#[derive(Debug, Parser)]
#[command(name = "alps", version, about = "Anomaly detection with adversarially perturbed autoencoder latents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    ClassVsRest,
    Frames,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Plain,
    Perturbed,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthArg {
    Blobs,
    Video,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run configuration file
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to `out_dir` in the config
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides ALPS_SEED and the configured seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a labeled test set
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory with test IDX files or PGM frames plus labels.csv
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "class-vs-rest")]
        protocol: ProtocolArg,
        /// Normal class for class-vs-rest
        #[arg(long)]
        inlier_class: Option<u8>,
        /// Reported variant; defaults to the one chosen during training
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long, value_enum, default_value = "max")]
        aggregation: AggregationArg,
        #[arg(long, default_value_t = synth::PATCH)]
        patch: usize,
        /// Directory for scores.csv, metrics.csv and summary.txt
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the raw plain, perturbed and mean scores of one image
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Write inputs beside their perturbed-latent reconstructions as a PGM grid
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        /// A PGM image or a directory of them
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus
    GenSynth {
        #[arg(long, value_enum, default_value = "blobs")]
        kind: SynthArg,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        inliers: usize,
        #[arg(long, default_value_t = 150)]
        outliers_per_class: usize,
        #[arg(long, default_value_t = 500)]
        test_inliers: usize,
        #[arg(long, default_value_t = 250)]
        test_outliers_per_class: usize,
        #[arg(long, default_value_t = 8)]
        train_frames: usize,
        #[arg(long, default_value_t = 30)]
        val_frames: usize,
        #[arg(long, default_value_t = 24)]
        test_frames: usize,
        #[arg(long, default_value_t = 3)]
        abnormal_every: usize,
    },
    /// Tile a PGM frame into square patches
    ExtractPatches {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = synth::PATCH)]
        patch: usize,
    },
}

fn variant(v: VariantArg) -> Variant {
    match v {
        VariantArg::Plain => Variant::Plain,
        VariantArg::Perturbed => Variant::Perturbed,
        VariantArg::Mean => Variant::Mean,
    }
}

/// Seed precedence: flag, then environment, then config file.
pub fn resolve_seed(flag: Option<u64>, env: Option<String>, configured: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        None => Ok(configured),
    }
}

pub fn execute(command: Command) -> Result<String> {
    match command {
        Command::Train { config, out, seed } => {
            let text = fs::read_to_string(&config)
                .map_err(|source| CliError::ConfigFile { path: config.clone(), source })?;
            let mut run = RunConfig::parse(&text)?;
            run.training.seed = resolve_seed(seed, std::env::var(SEED_ENV).ok(), run.training.seed)?;
            let out = out
                .or_else(|| run.out_dir.clone())
                .ok_or_else(|| CliError::Usage("no output directory: pass --out or set out_dir".into()))?;
            let s = commands::cmd_train(&run, &out)?;
            let best = match (s.best_epoch, s.best_auroc) {
                (Some(e), Some(a)) => format!("best epoch {e} (validation auroc {a:.4})"),
                _ => "no epochs run, initial model saved".to_string(),
            };
            Ok(format!(
                "trained {} epochs, {best}, score variant {}\nwrote {}\n",
                s.epochs_run,
                s.variant.name(),
                s.out_dir.display()
            ))
        }
        Command::Eval { ckpt, data, protocol, inlier_class, variant: v, aggregation, patch, out } => {
            let model = formats::load_checkpoint(&ckpt)?;
            let protocol = match protocol {
                ProtocolArg::ClassVsRest => Protocol::ClassVsRest {
                    inlier_class: inlier_class
                        .ok_or_else(|| CliError::Usage("--inlier-class is required for class-vs-rest".into()))?,
                },
                ProtocolArg::Frames => Protocol::Frames {
                    patch,
                    aggregation: match aggregation {
                        AggregationArg::Max => Aggregation::Max,
                        AggregationArg::Mean => Aggregation::Mean,
                    },
                },
            };
            let chosen = match v {
                Some(v) => variant(v),
                None => commands::recorded_variant(&ckpt)?.unwrap_or(Variant::Mean),
            };
            let report = commands::cmd_eval(&model, &data, protocol, chosen)?;
            let summary = commands::summary_text(&report);
            if let Some(dir) = out {
                formats::create_dir(&dir)?;
                formats::write_scores_csv(&dir.join("scores.csv"), &report)?;
                formats::write_metrics_csv(&dir.join("metrics.csv"), &report)?;
                formats::write_text(&dir.join("summary.txt"), &summary)?;
            }
            Ok(summary)
        }
        Command::Score { ckpt, input } => {
            let model = formats::load_checkpoint(&ckpt)?;
            Ok(commands::score_lines(&commands::cmd_score(&model, &input)?))
        }
        Command::Reconstruct { ckpt, input, out } => {
            let model = formats::load_checkpoint(&ckpt)?;
            let n = commands::cmd_reconstruct(&model, &input, &out)?;
            Ok(format!("wrote {n} rows to {}\n", out.display()))
        }
        Command::GenSynth {
            kind,
            seed,
            out,
            inliers,
            outliers_per_class,
            test_inliers,
            test_outliers_per_class,
            train_frames,
            val_frames,
            test_frames,
            abnormal_every,
        } => {
            let kind = match kind {
                SynthArg::Blobs => SynthKind::Blobs { inliers, outliers_per_class, test_inliers, test_outliers_per_class },
                SynthArg::Video => SynthKind::Video { train_frames, val_frames, test_frames, abnormal_every },
            };
            let n = commands::cmd_gen_synth(kind, seed, &out)?;
            Ok(format!("wrote {n} files to {}\n", out.display()))
        }
        Command::ExtractPatches { input, out, patch } => {
            let n = commands::cmd_extract_patches(&input, patch, &out)?;
            Ok(format!("wrote {n} patches to {}\n", out.display()))
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
