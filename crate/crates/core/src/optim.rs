use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer hyperparameters as they appear in a scenario config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the gradient so its global L2 norm is at most this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("clip_norm must be positive"));
            }
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and coupled weight decay:
/// `v <- momentum * v + (grad + wd * w)`, `w <- w - lr * v`.
/// With `clip_norm = c`, `grad` is first scaled by `min(1, c / ||grad||)`,
/// the norm taken over all parameters jointly.
#[derive(Clone, Debug)]
pub struct Sgd {
    base_lr: f64,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
    steps: u64,
}

impl Sgd {
    pub fn new(config: &SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            base_lr: config.learning_rate,
            lr: config.learning_rate,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            clip_norm: config.clip_norm,
            velocity: Vec::new(),
            steps: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn base_learning_rate(&self) -> f64 {
        self.base_lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter, then clears their gradients.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len()
            || self
                .velocity
                .iter()
                .zip(params.iter())
                .any(|(v, p)| v.len() != p.len())
        {
            return Err(Error::usage(
                "parameter list changed shape between optimizer steps",
            ));
        }
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::usage(format!("parameter {i} has no gradient")));
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = params
                    .iter()
                    .flat_map(|p| p.grad().expect("checked above"))
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (param, vel) in params.iter_mut().zip(&mut self.velocity) {
            let grad = param.grad().expect("checked above").to_vec();
            let data = param.data_mut();
            for ((w, v), g) in data.iter_mut().zip(vel.iter_mut()).zip(grad) {
                let g = g * scale;
                *v = self.momentum * *v + (g + self.weight_decay * *w);
                *w -= self.lr * *v;
            }
            param.clear_grad();
        }
        self.steps += 1;
        Ok(())
    }
}

/// Step decay: the learning rate is scaled by `factor` at each milestone epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant() -> Self {
        LrSchedule {
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor.is_finite()) {
            return Err(Error::config("factor must be positive"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("milestones must be strictly increasing"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`, given the initial rate.
    pub fn rate_at(&self, base_lr: f64, epoch: usize) -> f64 {
        let crossed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        (0..crossed).fold(base_lr, |lr, _| lr * self.factor)
    }

    /// Sets the optimizer's rate for `epoch`; idempotent per epoch.
    pub fn apply(&self, optimizer: &mut Sgd, epoch: usize) {
        optimizer.lr = self.rate_at(optimizer.base_lr, epoch);
    }
}
