use crate::error::{Error, Result};
use crate::nn::Model;
use crate::scalar::Scalar;

/// Exponential moving average of a model's parameters, `θ′ ← α·θ′ + (1−α)·θ`.
///
/// The shadow starts as an exact copy of the live model and is only used to
/// compute dropout masks.
#[derive(Debug, Clone)]
pub struct EmaState<T> {
    shadow: Model<T>,
    decay: f64,
    updates: u64,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(model: &Model<T>, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::Config(format!("ema decay {decay} outside (0, 1]")));
        }
        Ok(Self::with_decay_unchecked(model, decay))
    }

    /// Accepts any decay in `[0, 1]`; `0` makes the shadow a plain copy.
    pub fn with_decay_unchecked(model: &Model<T>, decay: f64) -> Self {
        Self {
            shadow: model.clone(),
            decay,
            updates: 0,
        }
    }

    pub fn shadow(&self) -> &Model<T> {
        &self.shadow
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn update(&mut self, model: &Model<T>) -> Result<()> {
        let alpha = T::of(self.decay);
        let beta = T::of(1.0 - self.decay);
        let live = model.params();
        let shadow = self.shadow.params_mut();
        if live.len() != shadow.len() {
            return Err(Error::Config("ema shadow and model disagree on parameters".into()));
        }
        for (s, p) in shadow.iter_mut().zip(live) {
            if s.value.shape() != p.value.shape() {
                return Err(Error::shape(
                    "ema_update",
                    format!("`{}` {:?} vs {:?}", p.name, s.value.shape(), p.value.shape()),
                ));
            }
            for (sv, &pv) in s.value.data_mut().iter_mut().zip(p.value.data()) {
                *sv = alpha * *sv + beta * pv;
            }
        }
        self.updates += 1;
        Ok(())
    }
}
