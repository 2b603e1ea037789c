use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, WeightDecay};
use crate::geometry::LossWeights;
use crate::{Error, Result};

/// Scene type; selects the schedule and stage-2 defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Indoor,
    #[default]
    Outdoor,
}

/// Which regression head a second-stage run fine-tunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Position,
    Orientation,
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position" => Ok(Head::Position),
            "orientation" => Ok(Head::Orientation),
            other => Err(Error::Config(format!(
                "head must be \"position\" or \"orientation\", got {other:?}"
            ))),
        }
    }
}

/// Optimizer and schedule settings. Fields left unset take the profile's
/// value: decay every 100 (indoor) or 200 (outdoor) epochs, 300 or 600
/// epochs in total, and for indoor scenes a second stage at lr 1e-3 with
/// weight decay 1e-2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub profile: Profile,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub lr_decay: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_period: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecay,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_epochs: Option<usize>,
    pub s_x0: f64,
    pub s_q0: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let w = LossWeights::default();
        TrainConfig {
            profile: Profile::Outdoor,
            batch_size: 8,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            lr: 1e-4,
            lr_decay: 0.1,
            decay_period: None,
            epochs: None,
            weight_decay: 1e-4,
            weight_decay_mode: WeightDecay::Decoupled,
            stage2_lr: None,
            stage2_weight_decay: None,
            stage2_epochs: None,
            s_x0: w.s_x,
            s_q0: w.s_q,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn indoor() -> Self {
        TrainConfig {
            profile: Profile::Indoor,
            ..Self::default()
        }
    }

    pub fn outdoor() -> Self {
        Self::default()
    }

    pub fn decay_period(&self) -> usize {
        self.decay_period.unwrap_or(match self.profile {
            Profile::Indoor => 100,
            Profile::Outdoor => 200,
        })
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.profile {
            Profile::Indoor => 300,
            Profile::Outdoor => 600,
        })
    }

    pub fn stage2_lr(&self) -> f64 {
        self.stage2_lr.unwrap_or(match self.profile {
            Profile::Indoor => 1e-3,
            Profile::Outdoor => self.lr,
        })
    }

    pub fn stage2_weight_decay(&self) -> f64 {
        self.stage2_weight_decay.unwrap_or(match self.profile {
            Profile::Indoor => 1e-2,
            Profile::Outdoor => self.weight_decay,
        })
    }

    pub fn stage2_epochs(&self) -> usize {
        self.stage2_epochs.unwrap_or_else(|| self.epochs())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            decay: self.weight_decay_mode,
        }
    }

    pub fn initial_loss_weights(&self) -> LossWeights {
        LossWeights {
            s_x: self.s_x0,
            s_q: self.s_q0,
        }
    }

    /// Same settings with every profile-dependent field filled in, as
    /// written to run directories.
    pub fn resolved(&self) -> Self {
        TrainConfig {
            decay_period: Some(self.decay_period()),
            epochs: Some(self.epochs()),
            stage2_lr: Some(self.stage2_lr()),
            stage2_weight_decay: Some(self.stage2_weight_decay()),
            stage2_epochs: Some(self.stage2_epochs()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr and eps must be positive, weight decay nonnegative".into(),
            ));
        }
        if self.decay_period() == 0 {
            return Err(Error::Config("decay period must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_defaults() {
        let o = TrainConfig::outdoor();
        assert_eq!((o.batch_size, o.lr, o.eps), (8, 1e-4, 1e-10));
        assert_eq!((o.decay_period(), o.epochs()), (200, 600));
        let i = TrainConfig::indoor();
        assert_eq!((i.decay_period(), i.epochs()), (100, 300));
        assert_eq!((i.stage2_lr(), i.stage2_weight_decay()), (1e-3, 1e-2));
        assert_eq!((o.stage2_lr(), o.stage2_weight_decay()), (1e-4, 1e-4));
    }

    #[test]
    fn resolved_round_trips_through_toml() {
        let c = TrainConfig::indoor().resolved();
        let back: TrainConfig = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn head_parsing() {
        assert_eq!("position".parse::<Head>().unwrap(), Head::Position);
        assert!("both".parse::<Head>().is_err());
    }
}
