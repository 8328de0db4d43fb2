//! First-order optimizers and learning-rate schedules.

use crate::error::{Error, Result};
use crate::nn::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerKind::Sgd { lr, momentum }
    }

    pub fn base_lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Divide the learning rate by `divide_by` after every `every` epochs.
    Step { divide_by: f64, every: usize },
}

impl LrSchedule {
    pub fn imagenet_step() -> Self {
        LrSchedule::Step {
            divide_by: 10.0,
            every: 30,
        }
    }

    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { divide_by, every } => base / divide_by.powi((epoch / every.max(1)) as i32),
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    first: Tensor<T>,
    second: Option<Tensor<T>>,
}

/// Optimizer state: kind, per-parameter moment buffers, step counter and
/// schedule.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    schedule: LrSchedule,
    lr: f64,
    steps: u64,
    moments: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule) -> Result<Self> {
        let lr = kind.base_lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if let LrSchedule::Step { divide_by, every } = schedule {
            if divide_by <= 0.0 || every == 0 {
                return Err(Error::Config("step schedule needs divide_by > 0 and every >= 1".into()));
            }
        }
        Ok(Self {
            kind,
            schedule,
            lr,
            steps: 0,
            moments: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies the schedule at an epoch boundary (epochs count from 0).
    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = self.schedule.lr_at(self.kind.base_lr(), epoch);
    }

    /// Updates every trainable parameter. `grads` is aligned with
    /// [`Model::params`]; frozen parameters may have `None`.
    pub fn step(&mut self, model: &mut Model<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        let params = model.params_mut();
        if grads.len() != params.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.trainable() {
                match g {
                    None => return Err(Error::MissingGradient(p.name.clone())),
                    Some(g) if g.shape() != p.value.shape() => {
                        return Err(Error::shape(
                            "optimizer step",
                            format!("gradient {:?} for `{}` {:?}", g.shape(), p.name, p.value.shape()),
                        ))
                    }
                    _ => {}
                }
            }
        }
        if self.moments.len() != params.len() {
            self.moments = vec![None; params.len()];
        }
        self.steps += 1;
        let lr = T::of(self.lr);
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            if !p.trainable() {
                continue;
            }
            let g = g.as_ref().expect("checked above").data();
            let shape = p.value.shape().to_vec();
            let m = slot.get_or_insert_with(|| Moments {
                first: Tensor::zeros(&shape),
                second: matches!(self.kind, OptimizerKind::Adam { .. }).then(|| Tensor::zeros(&shape)),
            });
            match self.kind {
                OptimizerKind::Sgd { momentum, .. } => {
                    let mu = T::of(momentum);
                    let theta = p.value.data_mut();
                    if momentum == 0.0 {
                        for (t, &gv) in theta.iter_mut().zip(g) {
                            *t -= lr * gv;
                        }
                    } else {
                        for ((t, v), &gv) in theta.iter_mut().zip(m.first.data_mut()).zip(g) {
                            *v = mu * *v + gv;
                            *t -= lr * *v;
                        }
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps, .. } => {
                    let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps));
                    let c1 = T::one() - T::of(beta1.powi(self.steps as i32));
                    let c2 = T::one() - T::of(beta2.powi(self.steps as i32));
                    let second = m.second.as_mut().expect("adam keeps second moments");
                    let theta = p.value.data_mut();
                    for (((t, mv), vv), &gv) in theta
                        .iter_mut()
                        .zip(m.first.data_mut())
                        .zip(second.data_mut())
                        .zip(g)
                    {
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *t -= lr * mhat / (vhat.sqrt() + e);
                    }
                }
            }
        }
        Ok(())
    }
}
