//! Minibatch SGD training of [`DeskNet`] with a per-iteration cosine
//! learning-rate schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::LoadedSplit;
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{stack, DeskNet};
use crate::nn::{self, Mode};
use crate::optim::{cosine_lr, sgd_step, SgdState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Seeds the shuffling order (weights are seeded separately).
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub clean_acc: f64,
}

/// Mean cross-entropy of one minibatch; updates the model in place.
fn train_step(
    model: &mut DeskNet<f32>,
    state: &mut SgdState<f32>,
    batch: &[crate::tensor::Tensor<f32>],
    labels: &[usize],
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(stack(batch)?);
    let out = model.forward(&mut tape, x, Mode::Train, true)?;
    let loss = nn::softmax_cross_entropy(&mut tape, out.logits, labels)?;
    let value = tape.value(loss).item()? as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    let mut grads = tape.backward(loss)?;
    let g: Vec<_> = out
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| crate::tensor::Tensor::zeros(p.shape())))
        .collect();
    sgd_step(model.params_mut(), &g, state, lr)?;
    model.set_bn_stats(out.bn)?;
    Ok(value)
}

/// Trains for `cfg.epochs` epochs, evaluating clean accuracy after each and
/// handing the model to `on_epoch`.
pub fn train(
    model: &mut DeskNet<f32>,
    train: &LoadedSplit,
    clean: &LoadedSplit,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &DeskNet<f32>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if clean.is_empty() {
        return Err(Error::invalid("clean evaluation split is empty"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("batch size and epochs must be positive"));
    }
    let n = train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut state = SgdState::new(cfg.lr0, cfg.momentum, cfg.weight_decay, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = idx.iter().map(|&i| train.images[i].clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.shape_labels[i]).collect();
            let lr = cosine_lr(step, total, cfg.lr0);
            loss_sum += train_step(model, &mut state, &batch, &labels, lr)? * idx.len() as f64;
            step += 1;
        }
        let preds = eval::classify(model, &clean.images)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / n as f64,
            clean_acc: eval::accuracy(&preds, &clean.shape_labels)?,
        };
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, Split};
    use crate::model::Arch;

    fn tiny_split(split: Split, n: usize) -> LoadedSplit {
        let mut out = LoadedSplit {
            images: Vec::new(),
            shape_labels: Vec::new(),
            texture_labels: Vec::new(),
        };
        for i in 0..n {
            let (rec, img) = generate_sample(split, i, 1, 16).unwrap();
            out.images.push(img);
            out.shape_labels.push(rec.shape);
            out.texture_labels.push(rec.texture);
        }
        out
    }

    fn tiny_arch() -> Arch {
        Arch {
            widths: vec![4, 8],
            image_size: 16,
            ..Arch::default()
        }
    }

    #[test]
    fn loss_decreases_and_runs_are_reproducible() {
        let train_set = tiny_split(Split::Train, 32);
        let clean = tiny_split(Split::Clean, 16);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = DeskNet::<f32>::new(tiny_arch(), 2).unwrap();
            let logs = train(&mut m, &train_set, &clean, &cfg, |_, _| Ok(())).unwrap();
            (m, logs)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        assert!(l1.last().unwrap().train_loss < l1[0].train_loss);
    }
}
