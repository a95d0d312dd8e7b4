//! Acceptance gate. Prints one line per criterion and exits non-zero when
//! any criterion fails.
//!
//! Criterion 7 reads MNIST IDX files from `$ALPS_MNIST_DIR` and is skipped
//! when that directory does not hold them.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use alps::commands::{prepare_data, test_seed};
use alps::config::RunConfig;
use alps::formats::{self, read_idx_dir, Split};
use alps_core::data::{encode_idx_images, encode_idx_labels, extract_patches, gen_blobs, GrayImage};
use alps_core::metrics::{auroc, auroc_fraction, eer};
use alps_core::models::{AlpsModel, ModelConfig, Trainable};
use alps_core::protocol::run_class_vs_rest;
use alps_core::scoring::{minmax_scale, reconstruct_both, score_batch, select_best_variant, ScoreSet, Variant};
use alps_core::training::{score_images, train, TrainOutcome, TrainingConfig, TrainingData};
use alps_core::{Activation, Graph, Tensor, Var};
use common::*;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// 1

fn worst_over_cases(cases: u64, seed: u64, mut make: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>)) -> f64 {
    (0..cases)
        .map(|c| {
            let mut r = rng(seed + c);
            let (inputs, build) = make(&mut r);
            check(&inputs, &*build, c)
        })
        .fold(0.0, f64::max)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cases = 20;
    let mut worst = Vec::new();
    worst.push((
        "conv2d",
        worst_over_cases(cases, 10_000, |r| {
            let (n, c, f) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
            let (kh, kw) = (r.random_range(1..4), r.random_range(1..4));
            let (s, p) = (r.random_range(1..3), r.random_range(0..2));
            let (h, w) = (r.random_range(kh..7), r.random_range(kw..7));
            let inputs = vec![random_tensor(r, &[n, c, h, w]), random_tensor(r, &[f, c, kh, kw]), random_tensor(r, &[f])];
            (inputs, Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.conv2d(v[0], v[1], v[2], s, p).unwrap()))
        }),
    ));
    worst.push((
        "conv2d_transpose",
        worst_over_cases(cases, 20_000, |r| {
            let (n, c, f) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
            let k = r.random_range(2..5);
            let s = r.random_range(1..3);
            let p = if k > 2 { r.random_range(0..2) } else { 0 };
            let (h, w) = (r.random_range(1..5), r.random_range(1..5));
            let inputs = vec![random_tensor(r, &[n, c, h, w]), random_tensor(r, &[c, f, k, k]), random_tensor(r, &[f])];
            (inputs, Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.conv_transpose2d(v[0], v[1], v[2], s, p).unwrap()))
        }),
    ));
    worst.push((
        "dense",
        worst_over_cases(cases, 30_000, |r| {
            let (n, d, m) = (r.random_range(1..4), r.random_range(1..6), r.random_range(1..6));
            let inputs = vec![random_tensor(r, &[n, d]), random_tensor(r, &[d, m]), random_tensor(r, &[m])];
            (inputs, Box::new(|g: &mut Graph<f64>, v: &[Var]| g.dense(v[0], v[1], v[2]).unwrap()))
        }),
    ));
    worst.push((
        "global_avg_pool",
        worst_over_cases(cases, 40_000, |r| {
            let shape = [r.random_range(1..3), r.random_range(1..4), r.random_range(1..5), r.random_range(1..5)];
            (vec![random_tensor(r, &shape)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.global_avg_pool(v[0]).unwrap()))
        }),
    ));
    let kinds = [
        ("relu", Activation::Relu),
        ("leaky_relu", Activation::LeakyRelu { alpha: 0.2 }),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
    ];
    for (name, kind) in kinds {
        worst.push((
            name,
            worst_over_cases(cases, 50_000, |r| {
                let n = r.random_range(1..12);
                // magnitudes kept away from the kink at zero
                let data = (0..n).map(|_| (0.05 + 1.5 * r.random::<f64>()) * if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
                let x = Tensor::from_vec(&[n], data).unwrap();
                (vec![x], Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.activation(v[0], kind)))
            }),
        ));
    }
    worst.push((
        "mse_loss",
        worst_over_cases(cases, 60_000, |r| {
            let n = r.random_range(1..20);
            (vec![random_tensor(r, &[n])], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.scale(v[0], 1.0)))
        }),
    ));
    let elapsed = start.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = format!("{cases} cases per op, {} ops, max rel err {max:.2e}, {}", worst.len(), secs(elapsed));
    let failing: Vec<&str> = worst.iter().filter(|w| !(w.1 < 1e-6)).map(|w| w.0).collect();
    ensure(failing.is_empty() && elapsed < Duration::from_secs(60), format!("{detail} failing {failing:?}"))
        .map(|_| detail)
}

// 2

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut auroc_ok = 0;
    for case in 0..200 {
        let n = r.random_range(2..150);
        let (mut s, l) = grid_scores(&mut r, n);
        if case % 2 == 0 {
            s.iter_mut().for_each(|v| *v = (*v * 8.0).floor());
        }
        if auroc_fraction(&s, &l).map_err(|e| e.to_string())? == pair_count_auroc(&s, &l) {
            auroc_ok += 1;
        }
    }
    let mut worst_eer: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(2..200);
        let (s, l) = grid_scores(&mut r, n);
        let got = eer(&s, &l).map_err(|e| e.to_string())?;
        worst_eer = worst_eer.max((got - dense_sweep_eer(&s, &l, 10_000)).abs());
    }
    let elapsed = start.elapsed();
    ensure(
        auroc_ok == 200 && worst_eer < 1e-3 && elapsed < Duration::from_secs(30),
        format!("auroc exact on {auroc_ok}/200, eer max deviation {worst_eer:.2e} on 50, {}", secs(elapsed)),
    )
}

// 3

fn zero_perturbation_equivalence() -> Outcome {
    let model = AlpsModel::<f32>::new(ModelConfig { delta_max: 0.0, ..Default::default() }, 42).map_err(|e| e.to_string())?;
    let mut r = rng(3);
    let mut identical = 0;
    for _ in 0..100 {
        let x: Tensor<f32> = Tensor::from_vec(&[1, 1, 32, 32], uniform_vec(&mut r, 1024, 0.0, 1.0)).unwrap().cast();
        let pass = |perturbed: bool| {
            let mut g = Graph::new();
            let b = model.bind(&mut g, Trainable::Nothing);
            let xv = g.constant(x.clone());
            let p = model.objective(&mut g, &b, xv, perturbed).unwrap();
            let bits: Vec<u32> = g.value(p.reconstruction).iter().map(|v| v.to_bits()).collect();
            (g.item(p.loss).to_bits(), bits)
        };
        let (plain, perturbed) = reconstruct_both(&model, &x).unwrap();
        let t = score_batch(&model, &x).unwrap()[0];
        let same_recon = plain.data().iter().zip(perturbed.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        let same_scores = t.plain.to_bits() == t.perturbed.to_bits() && t.mean.to_bits() == t.plain.to_bits();
        if pass(false) == pass(true) && same_recon && same_scores {
            identical += 1;
        }
    }
    ensure(identical == 100, format!("bit-identical loss, scores and reconstructions on {identical}/100 inputs"))
}

// 4

fn scaling_invariance() -> Outcome {
    let mut r = rng(4);
    let mut equal = 0;
    for _ in 0..100 {
        let n = r.random_range(2..400);
        let (grid, l) = grid_scores(&mut r, n);
        let raw: Vec<f64> = grid.iter().map(|v| v * r.random_range(0.01..100.0) + r.random_range(0.0..5.0)).collect();
        let scaled = minmax_scale(&raw).map_err(|e| e.to_string())?;
        if auroc(&raw, &l).unwrap() == auroc(&scaled, &l).unwrap() {
            equal += 1;
        }
    }
    ensure(equal == 100, format!("raw == scaled AUROC on {equal}/100 sets"))
}

// 5 and 6 share the blob corpus

struct BlobRuns {
    alps: TrainOutcome<f32>,
    alps_time: Duration,
    vanilla: TrainOutcome<f32>,
    validation: (Vec<GrayImage>, Vec<u8>),
}

fn blob_config() -> RunConfig {
    RunConfig::parse("dataset = synth-blobs\nsynth_inliers = 2000\nseed = 42\nepochs = 30\n").expect("valid config")
}

fn train_blobs(training: &TrainingConfig) -> Result<(TrainOutcome<f32>, Duration, (Vec<GrayImage>, Vec<u8>)), String> {
    let config = RunConfig { training: *training, ..blob_config() };
    let data = prepare_data(&config).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = train::<f32>(
        training,
        TrainingData { train: &data.train, validation: &data.validation, validation_labels: &data.validation_labels },
        |_, _| {},
    )
    .map_err(|e| e.to_string())?;
    Ok((out, start.elapsed(), (data.validation, data.validation_labels)))
}

fn blob_runs() -> Result<BlobRuns, String> {
    let training = blob_config().training;
    let (alps, alps_time, validation) = train_blobs(&training)?;
    let vanilla_cfg = TrainingConfig { model: ModelConfig { delta_max: 0.0, ..training.model }, ..training };
    let (vanilla, _, _) = train_blobs(&vanilla_cfg)?;
    Ok(BlobRuns { alps, alps_time, vanilla, validation })
}

fn desk_scale_training(runs: &BlobRuns) -> Outcome {
    let rec = &runs.alps.records;
    let best = runs.alps.best_epoch.map(|e| rec[e].val_auroc[Variant::Mean.index()]).unwrap_or(0.0);
    let (first, last) = (rec[0].train_loss, rec[rec.len() - 1].train_loss);
    ensure(
        best >= 0.90 && last < 0.25 * first && runs.alps_time < Duration::from_secs(300),
        format!(
            "best val AUROC {best:.4} (>= 0.90), final loss {last:.5} vs 0.25 x first {:.5}, {} epochs in {}",
            0.25 * first,
            rec.len(),
            secs(runs.alps_time)
        ),
    )
}

fn ablation_direction(runs: &BlobRuns) -> Outcome {
    let test = gen_blobs(test_seed(42), 500, 250);
    let (val_images, val_labels) = &runs.validation;
    let chosen = |m: &AlpsModel<f32>| -> Result<Variant, String> {
        let set = ScoreSet { triples: score_images(m, val_images).map_err(|e| e.to_string())?, labels: Some(val_labels.clone()) };
        select_best_variant(&set).map_err(|e| e.to_string())
    };
    let alps_variant = chosen(&runs.alps.best)?;
    let alps = run_class_vs_rest(&runs.alps.best, &test, 0, alps_variant).map_err(|e| e.to_string())?;
    let vanilla = run_class_vs_rest(&runs.vanilla.best, &test, 0, Variant::Plain).map_err(|e| e.to_string())?;
    let (a, v) = (alps.chosen_auroc(), vanilla.chosen_auroc());
    ensure(
        a >= v - 0.02,
        format!("ALPS test AUROC {a:.4} ({}) vs vanilla {v:.4}, margin {:+.4}", alps_variant.name(), a - v),
    )
}

// 7

fn mnist_dir() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os("ALPS_MNIST_DIR")?);
    let ok = formats::idx_paths(&dir, Split::Train).is_ok() && formats::idx_paths(&dir, Split::Test).is_ok();
    ok.then_some(dir)
}

fn mnist_smoke(dir: &Path) -> Outcome {
    let text = format!("dataset = idx\ndata_dir = {}\ninlier_class = 0\ntrain_limit = 6000\nepochs = 10\n", dir.display());
    let config = RunConfig::parse(&text).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let data = prepare_data(&config).map_err(|e| e.to_string())?;
    let out = train::<f32>(
        &config.training,
        TrainingData { train: &data.train, validation: &data.validation, validation_labels: &data.validation_labels },
        |_, _| {},
    )
    .map_err(|e| e.to_string())?;
    let set = ScoreSet { triples: score_images(&out.best, &data.validation).map_err(|e| e.to_string())?, labels: Some(data.validation_labels) };
    let variant = select_best_variant(&set).map_err(|e| e.to_string())?;
    let test = read_idx_dir(dir, Split::Test).map_err(|e| e.to_string())?;
    let report = run_class_vs_rest(&out.best, &test, 0, variant).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(
        report.chosen_auroc() >= 0.95 && elapsed < Duration::from_secs(1200),
        format!("digit 0 test AUROC {:.4} ({}) on {} images, {}", report.chosen_auroc(), variant.name(), test.len(), secs(elapsed)),
    )
}

// 8

fn cli_train(dir: &Path, out: &str) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_alps"))
        .args(["train", "--config", "run.cfg", "--out", out])
        .current_dir(dir)
        .env_remove("ALPS_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(String::from_utf8_lossy(&o.stderr).into_owned());
    }
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let cfg = "dataset = synth-blobs\nsynth_inliers = 400\nepochs = 4\ndistorter_every = 2\nseed = 8\n";
    fs::write(tmp.path().join("run.cfg"), cfg).map_err(|e| e.to_string())?;
    cli_train(tmp.path(), "a")?;
    cli_train(tmp.path(), "b")?;
    let read = |run: &str, file: &str| fs::read(tmp.path().join(run).join(file)).unwrap_or_default();
    let csv_same = read("a", "epochs.csv") == read("b", "epochs.csv") && !read("a", "epochs.csv").is_empty();
    let ckpt_same = read("a", "best.ckpt") == read("b", "best.ckpt") && !read("a", "best.ckpt").is_empty();
    ensure(csv_same && ckpt_same, format!("epoch CSV identical: {csv_same}, checkpoint identical: {ckpt_same}"))
}

// 9

fn format_round_trips() -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let model = AlpsModel::<f32>::new(ModelConfig::default(), 99).map_err(|e| e.to_string())?;
    let path = tmp.path().join("m.ckpt");
    formats::save_checkpoint(&path, &model).map_err(|e| e.to_string())?;
    let back = formats::load_checkpoint(&path).map_err(|e| e.to_string())?;
    let bits = |m: &AlpsModel<f32>| -> Vec<u32> {
        m.parameter_sets().iter().flat_map(|p| p.flat_values()).map(|v| v.to_bits()).collect()
    };
    let ckpt_ok = bits(&model) == bits(&back) && back.config == model.config;

    let set = gen_blobs(9, 30, 10);
    fs::write(tmp.path().join("train-images.idx"), encode_idx_images(&set.images).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    fs::write(tmp.path().join("train-labels.idx"), encode_idx_labels(&set.labels)).map_err(|e| e.to_string())?;
    let loaded = read_idx_dir(tmp.path(), Split::Train).map_err(|e| e.to_string())?;
    let idx_ok = loaded.labels == set.labels
        && loaded.images.iter().zip(&set.images).all(|(a, b)| a.to_bytes() == b.to_bytes())
        && encode_idx_images(&loaded.images).ok() == encode_idx_images(&set.images).ok();

    let patches = extract_patches(&GrayImage::filled(240, 360, 0.5), 30).map_err(|e| e.to_string())?.len();
    ensure(
        ckpt_ok && idx_ok && patches == 96,
        format!("checkpoint bit-exact: {ckpt_ok}, IDX exact: {idx_ok}, 240x360 frame -> {patches} patches"),
    )
}

fn report(n: usize, name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(d) => println!("criterion {n} [PRIMARY] {name}: PASS ({d})"),
        Err(d) => println!("criterion {n} [PRIMARY] {name}: FAIL ({d})"),
    }
    outcome.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= report(1, "gradient correctness", &gradient_correctness());
    ok &= report(2, "metric oracles", &metric_oracles());
    ok &= report(3, "zero-perturbation equivalence", &zero_perturbation_equivalence());
    ok &= report(4, "scaling invariance", &scaling_invariance());
    match blob_runs() {
        Ok(runs) => {
            ok &= report(5, "desk-scale training", &desk_scale_training(&runs));
            ok &= report(6, "ablation direction", &ablation_direction(&runs));
        }
        Err(e) => {
            ok &= report(5, "desk-scale training", &Err(e.clone()));
            ok &= report(6, "ablation direction", &Err(e));
        }
    }
    match mnist_dir() {
        Some(dir) => ok &= report(7, "MNIST smoke", &mnist_smoke(&dir)),
        None => println!("criterion 7 [PRIMARY] MNIST smoke: SKIP (set ALPS_MNIST_DIR to a directory with MNIST IDX files)"),
    }
    ok &= report(8, "determinism", &determinism());
    ok &= report(9, "format round trips", &format_round_trips());
    if !ok {
        std::process::exit(1);
    }
}
