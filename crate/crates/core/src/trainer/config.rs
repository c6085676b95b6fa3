use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::data::Granularity;
use crate::losses::TripletKind;

/// False for NaN.
fn is_positive(x: f32) -> bool {
    x > 0.0
}

/// One stage of the training curriculum. Which losses run is fixed by
/// `phase`; the weights only scale them.
///
/// | phase | losses                | frozen                  |
/// |-------|-----------------------|-------------------------|
/// | 1     | softmax               | `frozen`                |
/// | 2     | softmax + contrastive | unshared layers, `frozen` |
/// | 3     | triplet               | `frozen`                |
/// | 4     | triplet (instance)    | `frozen`                |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub phase: u8,
    pub triplet: TripletKind,
    pub margin: f32,
    pub contrastive_margin: f32,
    pub softmax_weight: f32,
    pub contrastive_weight: f32,
    /// Extra layer names held fixed.
    pub frozen: Vec<String>,
    /// Defaults to instance for phase 4 and category otherwise.
    pub granularity: Option<Granularity>,
    pub epochs: usize,
    /// Defaults to one pass over the training sketches (phase 4: photos).
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    /// Defaults to 0.01 in phase 1 and 0.001 afterwards.
    pub lr: Option<f32>,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Epochs without a validation improvement before stopping.
    pub patience: Option<usize>,
    pub augment: bool,
    pub validate: bool,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            phase: 3,
            triplet: TripletKind::Modified,
            margin: 1.0,
            contrastive_margin: 1.0,
            softmax_weight: 1.0,
            contrastive_weight: 1.0,
            frozen: Vec::new(),
            granularity: None,
            epochs: 5,
            steps_per_epoch: None,
            batch_size: 16,
            lr: None,
            lr_decay: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            patience: Some(5),
            augment: true,
            validate: true,
        }
    }
}

impl PhaseConfig {
    pub fn new(phase: u8) -> Self {
        Self {
            phase,
            ..Self::default()
        }
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity.unwrap_or(if self.phase == 4 {
            Granularity::Instance
        } else {
            Granularity::Category
        })
    }

    pub fn lr(&self) -> f32 {
        self.lr.unwrap_or(if self.phase == 1 { 0.01 } else { 0.001 })
    }

    pub fn uses_triplet(&self) -> bool {
        self.phase >= 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config(format!("phase {}: {msg}", self.phase)));
        if !(1..=4).contains(&self.phase) {
            return bad("phase must be 1, 2, 3 or 4".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive".into());
        }
        if !(self.margin > 0.0 && self.contrastive_margin > 0.0) {
            return bad("margins must be positive".into());
        }
        if !is_positive(self.lr()) || !is_positive(self.lr_decay) {
            return bad("learning rate and decay must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight decay be non-negative".into());
        }
        if self.softmax_weight < 0.0 || self.contrastive_weight < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_defaults() {
        assert_eq!(PhaseConfig::new(1).lr(), 0.01);
        assert_eq!(PhaseConfig::new(3).lr(), 0.001);
        assert_eq!(PhaseConfig::new(4).granularity(), Granularity::Instance);
        assert_eq!(PhaseConfig::new(2).granularity(), Granularity::Category);
        assert!(PhaseConfig::new(5).validate().is_err());
    }

    #[test]
    fn toml_rejects_unknown_keys() {
        let ok: PhaseConfig = toml::from_str("phase = 2\nepochs = 3\ncontrastive_weight = 0.5").unwrap();
        assert_eq!((ok.phase, ok.epochs, ok.contrastive_weight), (2, 3, 0.5));
        assert!(toml::from_str::<PhaseConfig>("phase = 2\nepoch = 3").is_err());
    }
}
