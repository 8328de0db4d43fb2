use std::time::{Duration, Instant};

use crate::attribution::{latent_attribution_batch, Score};
use crate::error::{Error, Result};
use crate::nn::{Mode, Model, Optimizer};
use rand::RngCore;
use crate::scalar::Scalar;
use crate::sgdrop::ema::EmaState;
use crate::sgdrop::mask::{compute_batch_masks, drop_count, DropMask};
use crate::sgdrop::schedule::RhoSchedule;
use crate::tensor::Tensor;
use crate::train::{batch_accuracy, loss_and_grads, FeatureOp};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdropConfig {
    pub rho: RhoSchedule,
    pub use_ema: bool,
    pub ema_decay: f64,
    pub score: Score,
}

impl Default for SgdropConfig {
    fn default() -> Self {
        Self {
            rho: RhoSchedule::Constant(0.01),
            use_ema: true,
            ema_decay: 0.99,
            score: Score::Logit,
        }
    }
}

impl SgdropConfig {
    pub fn validate(&self) -> Result<()> {
        self.rho.validate()?;
        if !(self.ema_decay > 0.0 && self.ema_decay <= 1.0) {
            return Err(Error::Config(format!("sgdrop.ema_decay {} outside (0, 1]", self.ema_decay)));
        }
        Ok(())
    }
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
    pub rho: f64,
    /// Features dropped per sample.
    pub drop_count: usize,
    /// Dropped features, over the whole batch, whose attribution was zero.
    pub zero_attribution_drops: usize,
    pub wall_time: Duration,
}

/// Masks for a batch computed from `teacher`'s own features and the true labels.
pub fn sgdrop_masks<T: Scalar>(
    teacher: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    rho: f64,
    score: Score,
) -> Result<(Tensor<T>, Vec<DropMask<T>>)> {
    let z = teacher.forward_encoder(x)?;
    let a = latent_attribution_batch(teacher, &z, labels, score)?;
    compute_batch_masks(&a, rho)
}

/// One SGDrop optimizer step:
///
/// 1. teacher pass on θ′ (or θ without EMA) and latent attribution of the true class,
/// 2. top-`⌊ρ·d⌋` mask per sample with `ρ = rho_at(epoch, total_epochs)`,
/// 3. masked student pass and cross-entropy,
/// 4. backward through encoder and classifier with the mask held constant,
/// 5. optimizer step,
/// 6. EMA update.
#[allow(clippy::too_many_arguments)]
pub fn sgdrop_step<T: Scalar>(
    model: &mut Model<T>,
    ema: Option<&mut EmaState<T>>,
    x: &Tensor<T>,
    labels: &[usize],
    config: &SgdropConfig,
    optimizer: &mut Optimizer<T>,
    epoch: usize,
    total_epochs: usize,
    rng: &mut dyn RngCore,
) -> Result<StepStats> {
    let start = Instant::now();
    let rho = config.rho.rho_at(epoch, total_epochs)?;
    if config.use_ema && ema.is_none() {
        return Err(Error::Config("sgdrop.use_ema is set but no EMA state was provided".into()));
    }
    let k = drop_count(rho, model.feature_len());
    let (mask, zero_drops) = if k == 0 {
        (None, 0)
    } else {
        let teacher = match (&ema, config.use_ema) {
            (Some(e), true) => e.shadow(),
            _ => &*model,
        };
        let (mask, per_sample) = sgdrop_masks(teacher, x, labels, rho, config.score)?;
        let zero = per_sample.iter().map(|m| m.zero_attribution_drops).sum();
        (Some(mask), zero)
    };
    let op = match &mask {
        Some(m) => FeatureOp::Mask(m),
        None => FeatureOp::None,
    };
    let (loss, logits, grads) = loss_and_grads(model, x, labels, op, &mut Mode::Train(rng))?;
    optimizer.step(model, &grads)?;
    if config.use_ema {
        if let Some(e) = ema {
            e.update(model)?;
        }
    }
    Ok(StepStats {
        loss: loss.as_f64(),
        accuracy: batch_accuracy(&logits, labels),
        rho,
        drop_count: k,
        zero_attribution_drops: zero_drops,
        wall_time: start.elapsed(),
    })
}
