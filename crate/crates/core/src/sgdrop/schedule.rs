use crate::error::{Error, Result};

/// Drop fraction as a function of the epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoSchedule {
    Constant(f64),
    /// Linear from `init` at the first epoch to `last` at the final epoch.
    Linear { init: f64, last: f64 },
}

impl RhoSchedule {
    /// The curriculum used for the large-ρ runs: 0.01 rising to 0.1.
    pub fn curriculum() -> Self {
        RhoSchedule::Linear { init: 0.01, last: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |r: f64| (0.0..1.0).contains(&r);
        match *self {
            RhoSchedule::Constant(r) if in_range(r) => Ok(()),
            RhoSchedule::Linear { init, last } if in_range(init) && in_range(last) && init <= last => Ok(()),
            other => Err(Error::Config(format!("invalid rho schedule {other:?}"))),
        }
    }

    /// ρ for `epoch` in `0..total_epochs`.
    pub fn rho_at(&self, epoch: usize, total_epochs: usize) -> Result<f64> {
        if epoch >= total_epochs {
            return Err(Error::EpochOutOfRange {
                epoch,
                total: total_epochs,
            });
        }
        Ok(match *self {
            RhoSchedule::Constant(r) => r,
            RhoSchedule::Linear { init, .. } if total_epochs == 1 => init,
            RhoSchedule::Linear { last, .. } if epoch == total_epochs - 1 => last,
            RhoSchedule::Linear { init, last } => {
                init + (last - init) * epoch as f64 / (total_epochs - 1) as f64
            }
        })
    }
}
