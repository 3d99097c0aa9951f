use serde::{Deserialize, Serialize};

use super::TrainError;

/// Optimizer, schedule and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Lower bound as a fraction of `lr0`.
    pub lr_floor: f64,
    pub bn_momentum0: f64,
    pub bn_decay: f64,
    pub bn_decay_every: usize,
    pub bn_floor: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Snapshot period in epochs; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    /// Stops after this many optimizer steps in total when set.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr0: 1e-4,
            weight_decay: 5e-4,
            lr_decay: 0.9,
            lr_decay_every: 8,
            lr_floor: 0.02,
            bn_momentum0: 0.9,
            bn_decay: 0.5,
            bn_decay_every: 3,
            bn_floor: 0.01,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<(), TrainError> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(TrainError::Config(format!("{name} must lie in (0, 1], got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.lr_decay_every == 0 || self.bn_decay_every == 0 {
            return Err(TrainError::Config("batch_size and decay periods must be positive".into()));
        }
        for (name, v) in [
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("lr_floor", self.lr_floor),
            ("bn_momentum0", self.bn_momentum0),
            ("bn_decay", self.bn_decay),
            ("bn_floor", self.bn_floor),
        ] {
            unit(name, v)?;
        }
        if !(0.0..=1.0).contains(&self.weight_decay) {
            return Err(TrainError::Config(format!("weight_decay must lie in [0, 1], got {}", self.weight_decay)));
        }
        if self.lr_floor >= 1.0 {
            return Err(TrainError::Config("lr_floor must be below 1 (a fraction of lr0)".into()));
        }
        if self.bn_floor >= self.bn_momentum0 {
            return Err(TrainError::Config("bn_floor must be below bn_momentum0".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(TrainError::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(TrainError::Config("eps must be positive".into()));
        }
        Ok(())
    }

    /// `(lr, bn_momentum)` for a zero-based epoch.
    pub fn schedules(&self, epoch: usize) -> (f64, f64) {
        let lr_steps = (epoch / self.lr_decay_every) as f64;
        let bn_steps = (epoch / self.bn_decay_every) as f64;
        let lr = (self.lr0 * self.lr_decay.powf(lr_steps)).max(self.lr_floor * self.lr0);
        let bn = (self.bn_momentum0 * self.bn_decay.powf(bn_steps)).max(self.bn_floor);
        (lr, bn)
    }
}
