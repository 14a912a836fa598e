//! Classification, accuracy and shape/texture bias on cue-conflict images.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::DeskNet;
use crate::tensor::{Scalar, Tensor};

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 64;

/// Index of the largest entry; the lowest index wins exact ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of a `[n, classes]` logit matrix.
pub fn predictions<S: Scalar>(logits: &Tensor<S>) -> Result<Vec<usize>> {
    let [_, k] = logits.shape()[..] else {
        return Err(Error::invalid(format!(
            "logits must be [n, classes], got {:?}",
            logits.shape()
        )));
    };
    Ok(logits.data().chunks_exact(k).map(argmax).collect())
}

/// Predicted class of every image, in input order.
pub fn classify<S: Scalar>(model: &DeskNet<S>, images: &[Tensor<S>]) -> Result<Vec<usize>> {
    if model.arch().classes != crate::data::NUM_CLASSES {
        return Err(Error::invalid(format!(
            "model has {} outputs, expected {}",
            model.arch().classes,
            crate::data::NUM_CLASSES
        )));
    }
    let batches: Vec<Vec<usize>> = crate::parallel::install(|| {
        images
            .par_chunks(EVAL_BATCH)
            .map(|chunk| predictions(&model.logits(chunk)?))
            .collect::<Result<_>>()
    })?;
    Ok(batches.concat())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Decision counts for one shape class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub n_total: usize,
    pub n_correct_shape: usize,
    pub n_correct_texture: usize,
    pub n_other: usize,
}

impl ClassCounts {
    fn add(&mut self, pred: usize, shape: usize, texture: usize) {
        self.n_total += 1;
        if pred == shape {
            self.n_correct_shape += 1;
        } else if pred == texture {
            self.n_correct_texture += 1;
        } else {
            self.n_other += 1;
        }
    }

    /// `(shape_bias, texture_bias)`, or `None` when no prediction matched
    /// either cue.
    pub fn biases(&self) -> Option<(f64, f64)> {
        let denom = self.n_correct_shape + self.n_correct_texture;
        (denom > 0).then(|| {
            (
                self.n_correct_shape as f64 / denom as f64,
                self.n_correct_texture as f64 / denom as f64,
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub n_total: usize,
    pub n_correct_shape: usize,
    pub n_correct_texture: usize,
    pub n_other: usize,
    pub shape_bias: f64,
    pub texture_bias: f64,
    /// Counts indexed by shape label.
    pub per_class: Vec<ClassCounts>,
}

/// Tallies cue-conflict decisions. Every sample must have distinct shape and
/// texture labels.
pub fn bias_counts(preds: &[usize], shape_labels: &[usize], texture_labels: &[usize]) -> Result<(ClassCounts, Vec<ClassCounts>)> {
    if preds.len() != shape_labels.len() || preds.len() != texture_labels.len() {
        return Err(Error::invalid("predictions and labels differ in length"));
    }
    let classes = shape_labels.iter().copied().max().map_or(0, |m| m + 1).max(crate::data::NUM_CLASSES);
    let mut total = ClassCounts::default();
    let mut per_class = vec![ClassCounts::default(); classes];
    for ((&p, &s), &t) in preds.iter().zip(shape_labels).zip(texture_labels) {
        if s == t {
            return Err(Error::invalid(format!(
                "sample with shape {s} and texture {t} is not a cue conflict"
            )));
        }
        total.add(p, s, t);
        per_class[s].add(p, s, t);
    }
    Ok((total, per_class))
}

/// Shape bias = shape hits / (shape hits + texture hits), texture bias
/// likewise. Fails with [`Error::UndefinedBias`] when the denominator is 0.
pub fn bias_scores(preds: &[usize], shape_labels: &[usize], texture_labels: &[usize]) -> Result<BiasReport> {
    let (total, per_class) = bias_counts(preds, shape_labels, texture_labels)?;
    let (shape_bias, texture_bias) = total.biases().ok_or(Error::UndefinedBias)?;
    Ok(BiasReport {
        n_total: total.n_total,
        n_correct_shape: total.n_correct_shape,
        n_correct_texture: total.n_correct_texture,
        n_other: total.n_other,
        shape_bias,
        texture_bias,
        per_class,
    })
}
