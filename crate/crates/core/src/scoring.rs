//! The three reconstruction-based anomaly scores and their normalization.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::mse;
use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::models::{AlpsModel, Trainable};
use crate::{Graph, Real, Tensor};

/// Score variant, in tie-breaking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Reconstruction error of the unperturbed latent code.
    Plain,
    /// Reconstruction error with the distorter's perturbation added.
    Perturbed,
    /// Average of the two raw errors.
    Mean,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Plain, Variant::Perturbed, Variant::Mean];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Perturbed => "perturbed",
            Variant::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreTriple {
    pub plain: f64,
    pub perturbed: f64,
    pub mean: f64,
}

impl ScoreTriple {
    pub fn new(plain: f64, perturbed: f64) -> Self {
        ScoreTriple { plain, perturbed, mean: (plain + perturbed) / 2.0 }
    }

    pub fn get(&self, v: Variant) -> f64 {
        match v {
            Variant::Plain => self.plain,
            Variant::Perturbed => self.perturbed,
            Variant::Mean => self.mean,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.plain, self.perturbed, self.mean]
    }
}

/// Reconstructions of a `[N, 1, R, R]` batch from the plain and from the
/// perturbed latent code.
pub fn reconstruct_both<T: Real>(model: &AlpsModel<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, Trainable::Nothing);
    let xv = g.constant(x.clone());
    let plain = model.objective(&mut g, &b, xv, false)?;
    let pert = model.objective(&mut g, &b, xv, true)?;
    Ok((g.tensor(plain.reconstruction), g.tensor(pert.reconstruction)))
}

/// Per-sample score triples of a `[N, 1, R, R]` batch. Parameters are only
/// read.
pub fn score_batch<T: Real>(model: &AlpsModel<T>, x: &Tensor<T>) -> Result<Vec<ScoreTriple>> {
    let (plain, pert) = reconstruct_both(model, x)?;
    let n = x.shape()[0];
    let per = x.len() / n;
    Ok((0..n)
        .map(|i| {
            let r = i * per..(i + 1) * per;
            let p = mse(&plain.data()[r.clone()], &x.data()[r.clone()]).as_f64();
            let q = mse(&pert.data()[r.clone()], &x.data()[r]).as_f64();
            ScoreTriple::new(p, q)
        })
        .collect())
}

pub fn score_sample<T: Real>(model: &AlpsModel<T>, x: &Tensor<T>) -> Result<ScoreTriple> {
    if x.shape().first() != Some(&1) {
        return Err(Error::InvalidShape(alloc::format!("score_sample expects one image, got {:?}", x.shape())));
    }
    Ok(score_batch(model, x)?[0])
}

/// `(s - min) / (max - min)`; a constant list maps to zeros.
pub fn minmax_scale(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Contract("cannot scale an empty score list".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.0; scores.len()]);
    }
    let range = hi - lo;
    Ok(scores.iter().map(|&s| (s - lo) / range).collect())
}

/// Score triples of one split with optional anomaly labels (1 = anomaly).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub triples: Vec<ScoreTriple>,
    pub labels: Option<Vec<u8>>,
}

impl ScoreSet {
    pub fn variant(&self, v: Variant) -> Vec<f64> {
        self.triples.iter().map(|t| t.get(v)).collect()
    }

    /// Min-max scaled scores of one variant over this split.
    pub fn scaled(&self, v: Variant) -> Result<Vec<f64>> {
        minmax_scale(&self.variant(v))
    }

    fn labels(&self) -> Result<&[u8]> {
        let labels = self.labels.as_deref().ok_or_else(|| Error::Contract("score set has no labels".into()))?;
        if labels.len() != self.triples.len() {
            return Err(Error::Contract("labels and scores are misaligned".into()));
        }
        Ok(labels)
    }

    pub fn aurocs(&self) -> Result<[f64; 3]> {
        let labels = self.labels()?;
        let mut out = [0.0; 3];
        for v in Variant::ALL {
            out[v.index()] = auroc(&self.variant(v), labels)?;
        }
        Ok(out)
    }
}

/// Variant with the highest AUROC on a labeled split; ties go to the
/// earlier variant in `Plain, Perturbed, Mean` order.
pub fn select_best_variant(validation: &ScoreSet) -> Result<Variant> {
    let aurocs = validation.aurocs()?;
    let mut best = Variant::Plain;
    for v in Variant::ALL {
        if aurocs[v.index()] > aurocs[best.index()] {
            best = v;
        }
    }
    Ok(best)
}
