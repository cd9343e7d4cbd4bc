use std::fmt;
use std::str::FromStr;

use crate::adversarial::AdvConfig;
use crate::data::AugmentSpec;
use crate::error::{Error, Result};
use crate::schedule::RampConfig;
use crate::segnet::SegModelConfig;
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Supervised, agreement and diversity losses.
    Dct,
    /// Supervised loss only, same batch draws as `Dct`.
    Independent,
    /// Supervised and agreement losses.
    JsdOnly,
    PseudoLabel,
    MeanTeacher,
    VatBaseline,
    DivProbe,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Dct,
        Method::Independent,
        Method::JsdOnly,
        Method::PseudoLabel,
        Method::MeanTeacher,
        Method::VatBaseline,
        Method::DivProbe,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Dct => "dct",
            Method::Independent => "independent",
            Method::JsdOnly => "jsd_only",
            Method::PseudoLabel => "pseudo_label",
            Method::MeanTeacher => "mean_teacher",
            Method::VatBaseline => "vat_baseline",
            Method::DivProbe => "div_probe",
        }
    }

    /// Methods that train an ensemble of `views` models with the pair sampler.
    pub fn is_cotraining(self) -> bool {
        matches!(self, Method::Dct | Method::Independent | Method::JsdOnly)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Every hyperparameter of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct CoTrainConfig {
    pub method: Method,
    pub views: usize,
    pub batch_size: usize,
    pub epochs: u32,
    /// `None` means one pass over the unlabeled pool, `ceil(|U| / b)`.
    pub iters_per_epoch: Option<usize>,
    pub labeled_ratio: f64,
    pub cot_ramp: RampConfig,
    pub div_ramp: RampConfig,
    pub adv: AdvConfig,
    pub adam: AdamConfig,
    pub lr_decay_every: u32,
    pub lr_decay_factor: f64,
    pub ema_alpha: f64,
    pub pseudo_alpha_start: f64,
    pub pseudo_alpha_end: f64,
    /// `None` disables augmentation.
    pub augment: Option<AugmentSpec>,
    pub model: SegModelConfig,
    pub seed: u64,
    /// Adversarial budgets of the diversity probe; FGSM uses each value as
    /// its L-infinity budget and VAT as a per-pixel RMS budget.
    pub probe_eps: Vec<f64>,
    pub probe_epochs: u32,
    pub probe_labeled_ratio: f64,
    pub reference_epochs: u32,
}

impl Default for CoTrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Dct,
            views: 2,
            batch_size: 4,
            epochs: 60,
            iters_per_epoch: None,
            labeled_ratio: 0.2,
            cot_ramp: RampConfig::cot_default(),
            div_ramp: RampConfig::div_default(),
            adv: AdvConfig::default(),
            adam: AdamConfig::default(),
            lr_decay_every: 90,
            lr_decay_factor: 0.1,
            ema_alpha: 0.99,
            pseudo_alpha_start: 50.0,
            pseudo_alpha_end: 99.0,
            augment: Some(AugmentSpec::default()),
            model: SegModelConfig::default(),
            seed: 1,
            probe_eps: vec![1e-4, 1e-3, 1e-2],
            probe_epochs: 40,
            probe_labeled_ratio: 0.5,
            reference_epochs: 40,
        }
    }
}

impl CoTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.method.is_cotraining() && self.views < 2 {
            return bad(format!("{} needs at least 2 views, got {}", self.method, self.views));
        }
        if self.views == 0 || self.batch_size == 0 {
            return bad("views and batch_size must be positive".into());
        }
        if self.iters_per_epoch == Some(0) {
            return bad("iters_per_epoch must be positive".into());
        }
        for (name, r) in [("labeled_ratio", self.labeled_ratio), ("probe_labeled_ratio", self.probe_labeled_ratio)] {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("{name} {r} outside (0, 1]"));
            }
        }
        if self.lr_decay_every == 0 || self.lr_decay_factor.is_nan() || self.lr_decay_factor <= 0.0 {
            return bad("lr decay needs a positive period and factor".into());
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha {} outside [0, 1]", self.ema_alpha));
        }
        let (a0, a1) = (self.pseudo_alpha_start, self.pseudo_alpha_end);
        if !(0.0 < a0 && a0 <= a1 && a1 <= 100.0) {
            return bad(format!("pseudo-label alpha range [{a0}, {a1}] invalid"));
        }
        if self.adam.lr <= 0.0 || self.adam.weight_decay < 0.0 {
            return bad("adam needs lr > 0 and weight_decay >= 0".into());
        }
        if self.probe_eps.iter().any(|&e| e.is_nan() || e <= 0.0) {
            return bad("probe eps values must be positive".into());
        }
        self.adv.validate()?;
        self.model.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    /// `T_max` for an unlabeled pool of `pool` images.
    pub fn iterations(&self, pool: usize) -> usize {
        self.iters_per_epoch.unwrap_or_else(|| pool.div_ceil(self.batch_size).max(1))
    }

    /// Pseudo-label confidence percentile for 0-based `epoch`, linear over the run.
    pub fn pseudo_alpha(&self, epoch: u32) -> f64 {
        let span = self.epochs.saturating_sub(1).max(1) as f64;
        let f = (epoch as f64 / span).min(1.0);
        self.pseudo_alpha_start + (self.pseudo_alpha_end - self.pseudo_alpha_start) * f
    }

    /// Loss weights of 0-based `epoch` for the active method.
    pub fn weights(&self, epoch: u32) -> (f64, f64) {
        let cot = self.cot_ramp.ramp(epoch);
        let div = self.div_ramp.ramp(epoch);
        match self.method {
            Method::Dct => (cot, div),
            Method::JsdOnly | Method::PseudoLabel | Method::MeanTeacher | Method::VatBaseline => (cot, 0.0),
            Method::Independent | Method::DivProbe => (0.0, 0.0),
        }
    }
}
