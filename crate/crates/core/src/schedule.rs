//! Gaussian ramp-up of the loss weights and step learning-rate decay.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampConfig {
    lambda_max: f64,
    t_ini: u32,
    t_end: u32,
}

impl RampConfig {
    pub fn new(lambda_max: f64, t_ini: u32, t_end: u32) -> Result<Self> {
        if t_ini >= t_end {
            return Err(Error::Config(format!("ramp needs t_ini < t_end, got {t_ini} >= {t_end}")));
        }
        if !(lambda_max >= 0.0 && lambda_max.is_finite()) {
            return Err(Error::Config(format!("ramp lambda_max must be finite and >= 0, got {lambda_max}")));
        }
        Ok(Self { lambda_max, t_ini, t_end })
    }

    /// Default agreement-weight ramp: 0.5, from epoch 1 to 50.
    pub fn cot_default() -> Self {
        Self { lambda_max: 0.5, t_ini: 1, t_end: 50 }
    }

    /// Default diversity-weight ramp: 0.05, from epoch 20 to 50.
    pub fn div_default() -> Self {
        Self { lambda_max: 0.05, t_ini: 20, t_end: 50 }
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn t_ini(&self) -> u32 {
        self.t_ini
    }

    pub fn t_end(&self) -> u32 {
        self.t_end
    }

    /// Weight after `t` completed epochs.
    pub fn ramp(&self, t: u32) -> f64 {
        if t < self.t_ini {
            0.0
        } else if t < self.t_end {
            let progress = f64::from(t - self.t_ini) / f64::from(self.t_end - self.t_ini);
            self.lambda_max * (-5.0 * (1.0 - progress).powi(2)).exp()
        } else {
            self.lambda_max
        }
    }
}

/// `initial_lr * factor^floor(epoch / decay_every)`.
pub fn lr_at(epoch: u32, initial_lr: f64, decay_every: u32, factor: f64) -> f64 {
    let decay_every = decay_every.max(1);
    initial_lr * factor.powi((epoch / decay_every) as i32)
}
