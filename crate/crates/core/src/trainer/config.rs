use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentConfig, EpisodeSpec};
use crate::error::{BmlError, Result};
use crate::losses::{LossConfig, LossWeights};
use crate::model::BackboneConfig;

/// Which objectives are trained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Both views with the global, local and mutual terms.
    #[default]
    Bml,
    /// Global view only (`β = γ = 0`).
    BaselineGlobal,
    /// Local view only (`α = γ = 0`).
    BaselineLocal,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Bml, Mode::BaselineGlobal, Mode::BaselineLocal];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Bml => "bml",
            Mode::BaselineGlobal => "baseline_global",
            Mode::BaselineLocal => "baseline_local",
        }
    }

    /// The configured weights with this mode's inactive terms zeroed.
    pub fn effective_weights(self, w: LossWeights) -> LossWeights {
        match self {
            Mode::Bml => w,
            Mode::BaselineGlobal => LossWeights { beta: 0.0, gamma: 0.0, ..w },
            Mode::BaselineLocal => LossWeights { alpha: 0.0, gamma: 0.0, ..w },
        }
    }

    pub fn uses_global(self) -> bool {
        self != Mode::BaselineLocal
    }

    pub fn uses_local(self) -> bool {
        self != Mode::BaselineGlobal
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = BmlError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| BmlError::Config(format!("unknown mode `{s}` (bml|baseline_global|baseline_local)")))
    }
}

/// Piecewise-constant, right-continuous lookup: the rate of the last entry
/// whose epoch is `<= epoch`.
pub fn lr_at(schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule
        .iter()
        .take_while(|(e, _)| *e <= epoch)
        .last()
        .or(schedule.first())
        .map_or(0.0, |&(_, lr)| lr)
}

/// `base · factor^k` at epochs `k·every` up to `epochs`.
pub fn step_decay_schedule(base: f64, every: usize, factor: f64, epochs: usize) -> Vec<(usize, f64)> {
    let every = every.max(1);
    (0..epochs.max(1))
        .step_by(every)
        .enumerate()
        .map(|(k, e)| (e, base * factor.powi(k as i32)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub train_spec: EpisodeSpec,
    /// Steps per epoch; by default enough batches to cover the base split once.
    pub steps_per_epoch: Option<usize>,
    pub val_spec: EpisodeSpec,
    /// Validation episodes per epoch; 0 disables validation.
    pub val_episodes: usize,
    pub augment: AugmentConfig,
    pub model: BackboneConfig,
    pub losses: LossConfig,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_schedule: vec![(0, 0.1), (50, 6e-3), (70, 1.2e-4)],
            momentum: 0.9,
            weight_decay: 5e-4,
            train_spec: EpisodeSpec::training_default(),
            steps_per_epoch: None,
            val_spec: EpisodeSpec { n_way: 5, k_shot: 5, q_query: 15 },
            val_episodes: 200,
            augment: AugmentConfig::default(),
            model: BackboneConfig::resnet12(),
            losses: LossConfig::default(),
            mode: Mode::Bml,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(BmlError::Config(m));
        if self.epochs == 0 {
            return err("epochs must be >= 1".into());
        }
        if self.lr_schedule.is_empty() || self.lr_schedule[0].0 != 0 {
            return err("lr_schedule must start at epoch 0".into());
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return err("lr_schedule epochs must be strictly increasing".into());
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !(lr.is_finite() && lr >= 0.0)) {
            return err("learning rates must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err("momentum must be in [0, 1) and weight_decay >= 0".into());
        }
        if self.steps_per_epoch == Some(0) {
            return err("steps_per_epoch must be >= 1".into());
        }
        self.train_spec.validate()?;
        self.val_spec.validate()?;
        if self.train_spec.n_way < 2 && self.mode.uses_local() {
            return err("local prototype loss needs train_spec.n_way >= 2".into());
        }
        self.model.validate()?;
        self.losses.validate()
    }

    /// Small budget for the desk backbone on 32px synthetic data.
    pub fn desk() -> Self {
        Self {
            epochs: 12,
            lr_schedule: vec![(0, 0.05), (8, 5e-3)],
            train_spec: EpisodeSpec { n_way: 8, k_shot: 1, q_query: 4 },
            steps_per_epoch: Some(10),
            val_episodes: 50,
            model: BackboneConfig::desk(),
            ..Self::default()
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(&self.lr_schedule, epoch)
    }

    /// Hex digest of the canonical JSON form; used to detect config changes on resume.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_is_right_continuous() {
        let s = TrainConfig::default().lr_schedule;
        assert_eq!(lr_at(&s, 0), 0.1);
        assert_eq!(lr_at(&s, 49), 0.1);
        assert_eq!(lr_at(&s, 50), 6e-3);
        assert_eq!(lr_at(&s, 69), 6e-3);
        assert_eq!(lr_at(&s, 70), 1.2e-4);
        assert_eq!(lr_at(&s, 99), 1.2e-4);
    }

    #[test]
    fn step_decay_every_forty() {
        let s = step_decay_schedule(0.1, 40, 0.1, 150);
        assert_eq!(s.len(), 4);
        assert!((lr_at(&s, 80) - 1e-3).abs() < 1e-15);
        assert!((lr_at(&s, 79) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn unsorted_schedule_is_rejected() {
        let cfg = TrainConfig {
            lr_schedule: vec![(0, 0.1), (10, 0.01), (10, 0.001)],
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_round_trips() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
    }
}
