//! Training steps for the three regularizers and a small epoch driver.

use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::{batches, sequential, Dataset};
use crate::error::{Error, Result};
use crate::nn::{classical_dropout, Bound, Mode, Model, Optimizer};
use crate::scalar::Scalar;
use crate::sgdrop::mask::apply_mask;
use crate::sgdrop::{sgdrop_step, EmaState, SgdropConfig, StepStats};
use crate::tensor::Tensor;

/// Transformation applied to the latent features between encoder and classifier.
#[derive(Clone, Copy)]
pub enum FeatureOp<'a, T> {
    None,
    /// Multiply by a constant mask of the feature shape.
    Mask(&'a Tensor<T>),
    /// Classical inverted dropout with this probability.
    Dropout(f64),
}

/// Gradients of `loss` for every trainable parameter, `None` for frozen ones.
pub fn collect_grads<T: Scalar>(model: &Model<T>, g: &Graph<T>, bound: &Bound, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
    let watched: Vec<Var> = model
        .params()
        .iter()
        .zip(&bound.vars)
        .filter(|(p, _)| p.trainable())
        .map(|(_, &v)| v)
        .collect();
    let mut grads = g.backward(loss, &watched)?;
    Ok(model
        .params()
        .iter()
        .zip(&bound.vars)
        .map(|(p, &v)| if p.trainable() { grads.take(v) } else { None })
        .collect())
}

/// Mean cross-entropy, the batch logits and the parameter gradients.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    op: FeatureOp<'_, T>,
    mode: &mut Mode<'_>,
) -> Result<(T, Tensor<T>, Vec<Option<Tensor<T>>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let xv = g.constant(x.detach());
    let z = model.encode(&mut g, &bound, xv, mode)?;
    let z = match op {
        FeatureOp::None => z,
        FeatureOp::Mask(m) => apply_mask(&mut g, z, m)?,
        FeatureOp::Dropout(p) => match mode {
            Mode::Train(rng) => classical_dropout(&mut g, z, p, true, &mut **rng)?,
            Mode::Eval => z,
        },
    };
    let logits = model.classify(&mut g, &bound, z, mode)?;
    let loss = g.cross_entropy(logits, labels)?;
    let grads = collect_grads(model, &g, &bound, loss)?;
    Ok((g.value(loss).data()[0], g.value(logits).detach(), grads))
}

/// Index of the largest entry in each row; the first maximum wins.
pub fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn batch_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Mean cross-entropy of a logit matrix, computed in f64.
pub fn cross_entropy_value<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("cross_entropy", format!("logits {s:?} vs {} labels", labels.len())));
    }
    let c = s[1];
    let mut total = 0.0;
    for (row, &l) in logits.data().chunks_exact(c).zip(labels) {
        if l >= c {
            return Err(Error::LabelOutOfRange { label: l, classes: c });
        }
        let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        total += lse - row[l].as_f64();
    }
    Ok(total / labels.len() as f64)
}

fn plain_step<T: Scalar>(
    model: &mut Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    op: FeatureOp<'_, T>,
    optimizer: &mut Optimizer<T>,
    rng: &mut dyn RngCore,
) -> Result<StepStats> {
    let start = Instant::now();
    let (loss, logits, grads) = loss_and_grads(model, x, labels, op, &mut Mode::Train(rng))?;
    optimizer.step(model, &grads)?;
    Ok(StepStats {
        loss: loss.as_f64(),
        accuracy: batch_accuracy(&logits, labels),
        rho: 0.0,
        drop_count: 0,
        zero_attribution_drops: 0,
        wall_time: start.elapsed(),
    })
}

/// Unregularized cross-entropy step.
pub fn vanilla_step<T: Scalar>(
    model: &mut Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    optimizer: &mut Optimizer<T>,
    rng: &mut dyn RngCore,
) -> Result<StepStats> {
    plain_step(model, x, labels, FeatureOp::None, optimizer, rng)
}

/// Step with classical dropout on the latent features.
pub fn dropout_step<T: Scalar>(
    model: &mut Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    p: f64,
    optimizer: &mut Optimizer<T>,
    rng: &mut dyn RngCore,
) -> Result<StepStats> {
    plain_step(model, x, labels, FeatureOp::Dropout(p), optimizer, rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer {
    None,
    Dropout { p: f64 },
    Sgdrop(SgdropConfig),
}

impl Regularizer {
    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Dropout { .. } => "dropout",
            Regularizer::Sgdrop(_) => "sgdrop",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Regularizer::None => Ok(()),
            Regularizer::Dropout { p } if (0.0..1.0).contains(p) => Ok(()),
            Regularizer::Dropout { p } => Err(Error::Config(format!("dropout.p {p} outside [0, 1)"))),
            Regularizer::Sgdrop(c) => c.validate(),
        }
    }
}

/// Averages over one epoch of steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    pub rho: Option<f64>,
    pub steps: usize,
    pub step_time: Duration,
}

/// Model, optimizer and regularizer state for a training run.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: Optimizer<T>,
    pub regularizer: Regularizer,
    pub ema: Option<EmaState<T>>,
    total_epochs: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    /// `seed` drives dropout draws; batch order comes from [`Trainer::train_epoch`].
    pub fn new(model: Model<T>, optimizer: Optimizer<T>, regularizer: Regularizer, total_epochs: usize, seed: u64) -> Result<Self> {
        regularizer.validate()?;
        if total_epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        let ema = match regularizer {
            Regularizer::Sgdrop(c) if c.use_ema => Some(EmaState::new(&model, c.ema_decay)?),
            _ => None,
        };
        Ok(Self {
            model,
            optimizer,
            regularizer,
            ema,
            total_epochs,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn total_epochs(&self) -> usize {
        self.total_epochs
    }

    /// One optimizer step at 0-based `epoch`.
    pub fn step(&mut self, x: &Tensor<T>, labels: &[usize], epoch: usize) -> Result<StepStats> {
        self.optimizer.set_epoch(epoch);
        match self.regularizer {
            Regularizer::None => vanilla_step(&mut self.model, x, labels, &mut self.optimizer, &mut self.rng),
            Regularizer::Dropout { p } => dropout_step(&mut self.model, x, labels, p, &mut self.optimizer, &mut self.rng),
            Regularizer::Sgdrop(config) => sgdrop_step(
                &mut self.model,
                self.ema.as_mut(),
                x,
                labels,
                &config,
                &mut self.optimizer,
                epoch,
                self.total_epochs,
                &mut self.rng,
            ),
        }
    }

    /// Runs every shuffled batch of `data` once.
    pub fn train_epoch(&mut self, data: &Dataset, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<EpochStats> {
        let mut loss = 0.0;
        let mut correct = 0.0;
        let mut time = Duration::ZERO;
        let mut rho = None;
        let order = batches(data.len(), batch_size, shuffle_seed, epoch as u64);
        for idx in &order {
            let (x, y) = data.batch::<T>(idx)?;
            let s = self.step(&x, &y, epoch)?;
            loss += s.loss * idx.len() as f64;
            correct += s.accuracy * idx.len() as f64;
            time += s.wall_time;
            if matches!(self.regularizer, Regularizer::Sgdrop(_)) {
                rho = Some(s.rho);
            }
        }
        let n = data.len().max(1) as f64;
        Ok(EpochStats {
            loss: loss / n,
            accuracy: correct / n,
            rho,
            steps: order.len(),
            step_time: time / order.len().max(1) as u32,
        })
    }
}

/// Eval-mode `(mean loss, accuracy)` over the whole dataset.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0.0;
    for idx in sequential(data.len(), batch_size) {
        let (x, y) = data.batch::<T>(&idx)?;
        let logits = model.logits(&x)?;
        loss += cross_entropy_value(&logits, &y)? * y.len() as f64;
        correct += batch_accuracy(&logits, &y) * y.len() as f64;
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct / n))
}
