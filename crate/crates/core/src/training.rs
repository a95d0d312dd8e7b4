//! Alternating adversarial training of the autoencoder and the distorter.
//!
//! Both players minimize/maximize the same perturbed reconstruction error
//! produced by [`AlpsModel::objective`]. The autoencoder descends on every
//! batch; the distorter ascends only in epochs whose index is a multiple of
//! `distorter_every`.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_tensor, GrayImage};
use crate::error::{Error, Result};
use crate::models::{AlpsModel, ModelConfig, Trainable};
use crate::nn::{Direction, Optimizer, OptimizerKind};
use crate::scoring::{score_batch, ScoreSet, ScoreTriple, Variant};
use crate::{Graph, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_ae: f64,
    pub lr_distorter: f64,
    /// The distorter is updated in epochs `0, n, 2n, ...`.
    pub distorter_every: usize,
    /// Weight of the reconstruction loss in the autoencoder update.
    pub w_ae: f64,
    /// Weight of the same loss in the distorter update.
    pub w_dist: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Score variant whose validation AUROC selects the best epoch.
    pub selection_variant: Variant,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            model: ModelConfig::default(),
            epochs: 30,
            batch_size: 32,
            lr_ae: 1e-3,
            lr_distorter: 1e-3,
            distorter_every: 3,
            w_ae: 1.0,
            w_dist: 0.5,
            seed: 42,
            optimizer: OptimizerKind::ADAM,
            selection_variant: Variant::Mean,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.distorter_every == 0 {
            return Err(Error::Config("distorter_every must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_ae > 0.0) || !(self.lr_distorter > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.w_dist > 0.0) || !(self.w_ae >= self.w_dist) {
            return Err(Error::Config(format!(
                "loss weights must satisfy w_ae >= w_dist > 0, got w_ae={} w_dist={}",
                self.w_ae, self.w_dist
            )));
        }
        Ok(())
    }

    /// Whether the distorter is updated during `epoch`.
    pub fn updates_distorter(&self, epoch: usize) -> bool {
        epoch % self.distorter_every == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean perturbed reconstruction error over the epoch's batches.
    pub train_loss: f64,
    /// Validation AUROC per [`Variant`], in `Variant::ALL` order.
    pub val_auroc: [f64; 3],
    pub is_best: bool,
}

/// Model and optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: AlpsModel<T>,
    config: TrainingConfig,
    opt_encoder: Optimizer<T>,
    opt_decoder: Optimizer<T>,
    opt_distorter: Optimizer<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let model = AlpsModel::new(config.model, config.seed)?;
        Self::with_model(config, model)
    }

    pub fn with_model(config: TrainingConfig, model: AlpsModel<T>) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            config,
            opt_encoder: Optimizer::new(config.optimizer, config.lr_ae)?,
            opt_decoder: Optimizer::new(config.optimizer, config.lr_ae)?,
            opt_distorter: Optimizer::new(config.optimizer, config.lr_distorter)?,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    fn perturbs(&self) -> bool {
        // with a zero bound the perturbed expression equals the plain one
        self.config.model.delta_max > 0.0
    }

    fn check_loss(&self, loss: T) -> Result<f64> {
        let l = loss.as_f64();
        if !l.is_finite() {
            return Err(Error::Diverged { epoch: 0, detail: format!("non-finite reconstruction loss {l}") });
        }
        Ok(l)
    }

    /// Accumulates the gradient of `weight * objective` into the parameters
    /// of the `trainable` player and returns the unweighted loss.
    pub fn accumulate(&mut self, batch: &Tensor<T>, trainable: Trainable, weight: f64, perturbed: bool) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.model.bind(&mut g, trainable);
        let x = g.constant(batch.clone());
        let pass = self.model.objective(&mut g, &b, x, perturbed)?;
        let loss = self.check_loss(g.item(pass.loss))?;
        let weighted = g.scale(pass.loss, T::of(weight));
        g.backward(weighted)?;
        match trainable {
            Trainable::Autoencoder => {
                self.model.encoder.params_mut().accumulate_grads(&g, &b.encoder)?;
                self.model.decoder.params_mut().accumulate_grads(&g, &b.decoder)?;
            }
            Trainable::Distorter => self.model.distorter.params_mut().accumulate_grads(&g, &b.distorter)?,
            Trainable::Nothing => {}
        }
        Ok(loss)
    }

    /// One descent update of encoder and decoder against the perturbed
    /// reconstruction error, distorter frozen.
    pub fn ae_step(&mut self, batch: &Tensor<T>) -> Result<f64> {
        let perturbed = self.perturbs();
        self.ae_step_with(batch, perturbed)
    }

    /// One descent update of the autoencoder alone, without perturbation.
    pub fn plain_ae_step(&mut self, batch: &Tensor<T>) -> Result<f64> {
        self.ae_step_with(batch, false)
    }

    fn ae_step_with(&mut self, batch: &Tensor<T>, perturbed: bool) -> Result<f64> {
        self.model.zero_grads();
        let loss = self.accumulate(batch, Trainable::Autoencoder, self.config.w_ae, perturbed)?;
        self.opt_encoder.step(self.model.encoder.params_mut(), Direction::Descent)?;
        self.opt_decoder.step(self.model.decoder.params_mut(), Direction::Descent)?;
        Ok(loss)
    }

    /// One ascent update of the distorter on the perturbed reconstruction
    /// error, autoencoder frozen.
    pub fn distorter_step(&mut self, batch: &Tensor<T>) -> Result<f64> {
        self.model.zero_grads();
        let loss = self.accumulate(batch, Trainable::Distorter, self.config.w_dist, true)?;
        self.opt_distorter.step(self.model.distorter.params_mut(), Direction::Ascent)?;
        Ok(loss)
    }

    /// Runs one epoch over `train` in a seed-determined order and returns the
    /// mean perturbed training loss.
    pub fn run_epoch(&mut self, epoch: usize, train: &[GrayImage]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let with_distorter = self.config.updates_distorter(epoch) && self.perturbs();
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let imgs: Vec<&GrayImage> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = batch_tensor::<T>(&imgs)?;
            let loss = self.ae_step(&batch).map_err(|e| at_epoch(e, epoch))?;
            total += loss * chunk.len() as f64;
            if with_distorter {
                self.distorter_step(&batch).map_err(|e| at_epoch(e, epoch))?;
            }
        }
        Ok(total / train.len() as f64)
    }
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Diverged { detail, .. } => Error::Diverged { epoch, detail },
        other => other,
    }
}

/// Scores images in fixed-size chunks.
pub fn score_images<T: Real>(model: &AlpsModel<T>, images: &[GrayImage]) -> Result<Vec<ScoreTriple>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let refs: Vec<&GrayImage> = chunk.iter().collect();
        out.extend(score_batch(model, &batch_tensor::<T>(&refs)?)?);
    }
    Ok(out)
}

/// Inputs of a training run, already at the model resolution.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    /// Inliers only.
    pub train: &'a [GrayImage],
    pub validation: &'a [GrayImage],
    /// Anomaly labels of `validation` (1 = outlier).
    pub validation_labels: &'a [u8],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Model of the epoch with the best validation AUROC, or the initial
    /// model when no epoch ran.
    pub best: AlpsModel<T>,
    pub best_epoch: Option<usize>,
    pub records: Vec<EpochRecord>,
    pub last: AlpsModel<T>,
}

/// Full training run. `on_epoch` sees every record as soon as it exists.
pub fn train<T: Real>(
    config: &TrainingConfig,
    data: TrainingData<'_>,
    mut on_epoch: impl FnMut(&EpochRecord, &AlpsModel<T>),
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::<T>::new(*config)?;
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if data.validation.len() != data.validation_labels.len() {
        return Err(Error::Contract("validation images and labels are misaligned".into()));
    }
    let mut best = trainer.model.clone();
    let mut best_epoch = None;
    let mut best_metric = f64::NEG_INFINITY;
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let train_loss = trainer.run_epoch(epoch, data.train)?;
        let val = ScoreSet {
            triples: score_images(&trainer.model, data.validation)?,
            labels: Some(data.validation_labels.to_vec()),
        };
        let val_auroc = val.aurocs()?;
        let metric = val_auroc[config.selection_variant.index()];
        let is_best = metric > best_metric;
        if is_best {
            best_metric = metric;
            best_epoch = Some(epoch);
            best = trainer.model.clone();
        }
        let record = EpochRecord { epoch, train_loss, val_auroc, is_best };
        on_epoch(&record, &trainer.model);
        records.push(record);
    }
    Ok(TrainOutcome { best, best_epoch, records, last: trainer.model })
}
